//! HWC feature tensors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape, right: Shape },
    #[error("data length {actual} does not match shape {shape} ({expected} elements)")]
    LengthMismatch {
        shape: Shape,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0}: every dimension must be positive")]
    InvalidShape(Shape),
    #[error("mask selects no elements")]
    EmptyMask,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
}

/// Height, width and channel count of an HWC tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major `(y, x, c)` offset.
    #[inline]
    pub const fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// A 3-D activation array stored row-major in `(y, x, c)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.height == 0 || shape.width == 0 || shape.channels == 0 {
            return Err(TensorError::InvalidShape(shape));
        }
        if data.len() != shape.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected: shape.len(),
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        assert!(!shape.is_empty(), "empty shape {shape}");
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        assert!(!shape.is_empty(), "empty shape {shape}");
        let mut data = Vec::with_capacity(shape.len());
        for y in 0..shape.height {
            for x in 0..shape.width {
                for c in 0..shape.channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.shape.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        let i = self.shape.index(y, x, c);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// One channel as a row-major `H x W` map.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.shape.channels)
            .copied()
            .collect()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Index of the first non-finite element, if any.
    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(TensorError::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_row_major_hwc() {
        let s = Shape::new(2, 3, 4);
        assert_eq!(s.index(0, 0, 1), 1);
        assert_eq!(s.index(0, 1, 0), 4);
        assert_eq!(s.index(1, 0, 0), 12);
        assert_eq!(s.index(1, 2, 3), 23);
    }

    #[test]
    fn rejects_bad_length_and_empty_dims() {
        assert!(matches!(
            FeatureTensor::new(Shape::new(2, 2, 2), vec![0.0; 7]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(matches!(
            FeatureTensor::new(Shape::new(0, 2, 2), vec![]),
            Err(TensorError::InvalidShape(_))
        ));
    }

    #[test]
    fn channel_extraction() {
        let t =
            FeatureTensor::from_fn(Shape::new(2, 2, 3), |y, x, c| (100 * c + 10 * y + x) as f32);
        assert_eq!(t.channel(2), vec![200.0, 201.0, 210.0, 211.0]);
        assert_eq!(t.get(1, 0, 1), 110.0);
    }

    #[test]
    fn finite_check() {
        let mut t = FeatureTensor::zeros(Shape::new(1, 2, 2));
        assert!(t.check_finite().is_ok());
        t.set(0, 1, 0, f32::NAN);
        assert!(matches!(t.check_finite(), Err(TensorError::NonFinite(2))));
    }
}
