//! Motion-compensated prediction of cut tensors.
//!
//! Motion is estimated once on the model input and rescaled to the tensor's
//! resolution; every channel reuses the same field. A field maps target
//! pixel `(y, x)` to source `(y + vy, x + vx)` in the reference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{psnr_from_mse, Psnr};
use crate::model::{CutPoint, ModelError, StubModel};
use crate::tensor::{FeatureTensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum MotionError {
    #[error("search radius must be at least 1")]
    Radius,
    #[error("field is {field_h}x{field_w}, tensor is {tensor_h}x{tensor_w}")]
    Resolution {
        field_h: usize,
        field_w: usize,
        tensor_h: usize,
        tensor_w: usize,
    },
    #[error("dense field needs {expected} vectors, got {actual}")]
    FieldLength { expected: usize, actual: usize },
    #[error("no shift within the search radius overlaps the frames")]
    NoOverlap,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
enum Vectors {
    Global { dx: f64, dy: f64 },
    Dense { vx: Vec<f64>, vy: Vec<f64> },
}

/// Per-pixel source offsets for one tensor resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    height: usize,
    width: usize,
    vectors: Vectors,
    valid: Vec<bool>,
}

fn source_in_range(pos: f64, len: usize) -> bool {
    pos.floor() >= 0.0 && pos.ceil() <= (len - 1) as f64
}

impl MotionField {
    pub fn global(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        let vectors = Vectors::Global { dx, dy };
        let valid = Self::mask_for(height, width, &vectors);
        Self {
            height,
            width,
            vectors,
            valid,
        }
    }

    /// One vector per pixel, row-major.
    pub fn dense(
        height: usize,
        width: usize,
        vx: Vec<f64>,
        vy: Vec<f64>,
    ) -> Result<Self, MotionError> {
        let expected = height * width;
        for actual in [vx.len(), vy.len()] {
            if actual != expected {
                return Err(MotionError::FieldLength { expected, actual });
            }
        }
        let vectors = Vectors::Dense { vx, vy };
        let valid = Self::mask_for(height, width, &vectors);
        Ok(Self {
            height,
            width,
            vectors,
            valid,
        })
    }

    fn mask_for(h: usize, w: usize, v: &Vectors) -> Vec<bool> {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = Self::source_of(v, w, y, x);
                out.push(source_in_range(sy, h) && source_in_range(sx, w));
            }
        }
        out
    }

    #[inline]
    fn source_of(v: &Vectors, w: usize, y: usize, x: usize) -> (f64, f64) {
        match v {
            Vectors::Global { dx, dy } => (x as f64 + dx, y as f64 + dy),
            Vectors::Dense { vx, vy } => (x as f64 + vx[y * w + x], y as f64 + vy[y * w + x]),
        }
    }

    /// Source position `(x, y)` for target pixel `(y, x)`.
    pub fn source(&self, y: usize, x: usize) -> (f64, f64) {
        Self::source_of(&self.vectors, self.width, y, x)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// The global vector, if this field is a pure translation.
    pub fn translation(&self) -> Option<(f64, f64)> {
        match self.vectors {
            Vectors::Global { dx, dy } => Some((dx, dy)),
            Vectors::Dense { .. } => None,
        }
    }

    /// Per pixel: `true` when the source lies inside the reference.
    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Valid pixels whose target and source footprints both stay `border`
    /// pixels away from the frame edge.
    pub fn interior_mask(&self, border: usize) -> Vec<bool> {
        let (h, w) = (self.height as f64, self.width as f64);
        let b = border as f64;
        let inside = |p: f64, len: f64| p.floor() >= b && p.ceil() <= len - 1.0 - b;
        let mut out = Vec::with_capacity(self.valid.len());
        for y in 0..self.height {
            for x in 0..self.width {
                let (sx, sy) = self.source(y, x);
                out.push(
                    self.valid[y * self.width + x]
                        && inside(y as f64, h)
                        && inside(x as f64, w)
                        && inside(sy, h)
                        && inside(sx, w),
                );
            }
        }
        out
    }
}

/// Channel mean per pixel.
fn luma(t: &FeatureTensor) -> Vec<f64> {
    let c = t.channels();
    t.data()
        .chunks_exact(c)
        .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / c as f64)
        .collect()
}

/// Integer translation `(dx, dy)` such that `cur(y, x) ~ ref(y + dy, x + dx)`.
///
/// Exhaustive search over `[-radius, radius]^2` minimizing the mean absolute
/// luma difference over the overlap. Ties prefer the smallest `|dx| + |dy|`,
/// then the smallest `dy`, then `dx`. A true shift beyond the radius
/// saturates to the boundary shift that fits best.
pub fn estimate_global_translation(
    reference: &FeatureTensor,
    current: &FeatureTensor,
    radius: i32,
) -> Result<(i32, i32), MotionError> {
    if radius < 1 {
        return Err(MotionError::Radius);
    }
    reference.ensure_same_shape(current)?;
    let (h, w) = (reference.height() as i32, reference.width() as i32);
    let (r, c) = (luma(reference), luma(current));
    let candidates: Vec<(i32, i32)> = (-radius..=radius)
        .flat_map(|dy| (-radius..=radius).map(move |dx| (dx, dy)))
        .collect();
    let costs: Vec<Option<f64>> = candidates
        .par_iter()
        .map(|&(dx, dy)| {
            let (y0, y1) = (0.max(-dy), h.min(h - dy));
            let (x0, x1) = (0.max(-dx), w.min(w - dx));
            if y0 >= y1 || x0 >= x1 {
                return None;
            }
            let mut sad = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sad += (c[(y * w + x) as usize] - r[((y + dy) * w + x + dx) as usize]).abs();
                }
            }
            Some(sad / ((y1 - y0) * (x1 - x0)) as f64)
        })
        .collect();
    candidates
        .iter()
        .zip(&costs)
        .filter_map(|(&v, cost)| cost.map(|c| (v, c)))
        .min_by(|(a, ca), (b, cb)| {
            ca.total_cmp(cb)
                .then((a.0.abs() + a.1.abs()).cmp(&(b.0.abs() + b.1.abs())))
                .then(a.1.cmp(&b.1))
                .then(a.0.cmp(&b.0))
        })
        .map(|(v, _)| v)
        .ok_or(MotionError::NoOverlap)
}

/// Global field at `cut` resolution for an input-pixel translation.
pub fn scale_to_tensor(input_shift: (f64, f64), cut: CutPoint) -> MotionField {
    let s = cut.output_shape();
    let stride = cut.stride() as f64;
    MotionField::global(
        s.height,
        s.width,
        input_shift.0 / stride,
        input_shift.1 / stride,
    )
}

/// Predict a tensor from `reference`; invalid pixels are zero and masked out.
pub fn predict(
    reference: &FeatureTensor,
    field: &MotionField,
) -> Result<(FeatureTensor, Vec<bool>), MotionError> {
    let (h, w, ch) = (reference.height(), reference.width(), reference.channels());
    if field.height != h || field.width != w {
        return Err(MotionError::Resolution {
            field_h: field.height,
            field_w: field.width,
            tensor_h: h,
            tensor_w: w,
        });
    }
    let mut out = FeatureTensor::zeros(reference.shape());
    for y in 0..h {
        for x in 0..w {
            if !field.valid[y * w + x] {
                continue;
            }
            let (sx, sy) = field.source(y, x);
            let (fx, fy) = (sx.floor(), sy.floor());
            let (ax, ay) = (sx - fx, sy - fy);
            let (x0, y0) = (fx as usize, fy as usize);
            if ax == 0.0 && ay == 0.0 {
                for c in 0..ch {
                    out.set(y, x, c, reference.get(y0, x0, c));
                }
                continue;
            }
            let x1 = if ax > 0.0 { x0 + 1 } else { x0 };
            let y1 = if ay > 0.0 { y0 + 1 } else { y0 };
            for c in 0..ch {
                let v00 = reference.get(y0, x0, c) as f64;
                let v01 = reference.get(y0, x1, c) as f64;
                let v10 = reference.get(y1, x0, c) as f64;
                let v11 = reference.get(y1, x1, c) as f64;
                let top = v00 + (v01 - v00) * ax;
                let bottom = v10 + (v11 - v10) * ax;
                out.set(y, x, c, (top + (bottom - top) * ay) as f32);
            }
        }
    }
    Ok((out, field.valid.clone()))
}

/// Expand a per-pixel mask to every channel.
pub fn expand_mask(pixel_mask: &[bool], channels: usize) -> Vec<bool> {
    pixel_mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(m, channels))
        .collect()
}

/// Prediction quality for one input translation over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub shift_px: f64,
    pub tensor_shift: f64,
    /// From the corpus-mean interior MSE and mean reference range.
    pub psnr: Psnr,
    pub mean_mse: f64,
    pub max_abs_error: f64,
    pub interior_pixels: usize,
}

/// Predict each image translated horizontally by `shift_px` from its
/// untranslated reference, scoring interior pixels only.
pub fn shift_experiment(
    model: &StubModel,
    corpus: &[u64],
    cut: CutPoint,
    shift_px: f64,
) -> Result<ShiftReport, MotionError> {
    let field = scale_to_tensor((shift_px, 0.0), cut);
    let mask = expand_mask(
        &field.interior_mask(cut.border_width()),
        cut.output_shape().channels,
    );
    let per_image: Vec<Result<(f64, f64, f64), MotionError>> = corpus
        .par_iter()
        .map(|&id| {
            let reference = model.cut_tensor(id, cut);
            let current = model.forward_client(&model.generate_input(id, (shift_px, 0.0)), cut)?;
            let (pred, _) = predict(&reference, &field)?;
            let mse = crate::metrics::mse(&current, &pred, Some(&mask))?;
            let max_err = current
                .data()
                .iter()
                .zip(pred.data())
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|((&a, &b), _)| (a as f64 - b as f64).abs())
                .fold(0.0, f64::max);
            let (lo, hi) = current.min_max();
            Ok((mse, max_err, hi as f64 - lo as f64))
        })
        .collect();
    let per_image = per_image.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = per_image.len() as f64;
    let mean_mse = per_image.iter().map(|r| r.0).sum::<f64>() / n;
    let mean_range = per_image.iter().map(|r| r.2).sum::<f64>() / n;
    Ok(ShiftReport {
        shift_px,
        tensor_shift: shift_px / cut.stride() as f64,
        psnr: psnr_from_mse(mean_range, mean_mse),
        mean_mse,
        max_abs_error: per_image.iter().map(|r| r.1).fold(0.0, f64::max),
        interior_pixels: mask.iter().filter(|&&m| m).count() / cut.output_shape().channels,
    })
}
