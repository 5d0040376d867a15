//! Distortion metrics and empirical entropy.

use serde::{Deserialize, Serialize};

use crate::tensor::{FeatureTensor, TensorError};

/// PSNR with explicit sentinels for the degenerate cases, so serialized
/// output never contains raw floating infinities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Psnr {
    Db(f64),
    /// MSE is exactly zero.
    Infinite,
    /// Dynamic range is zero but MSE is not.
    NegInfinite,
}

impl Psnr {
    pub fn as_f64(self) -> f64 {
        match self {
            Psnr::Db(v) => v,
            Psnr::Infinite => f64::INFINITY,
            Psnr::NegInfinite => f64::NEG_INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Psnr::Db(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub mse: f64,
    pub psnr: Psnr,
    /// `max - min` of the reference tensor.
    pub dynamic_range: f64,
}

impl DistortionReport {
    /// Zero dynamic range with non-zero error.
    pub fn is_degenerate(&self) -> bool {
        self.psnr == Psnr::NegInfinite
    }
}

fn check_mask(t: &FeatureTensor, mask: Option<&[bool]>) -> Result<(), TensorError> {
    if let Some(m) = mask {
        if m.len() != t.len() {
            return Err(TensorError::LengthMismatch {
                shape: t.shape(),
                expected: t.len(),
                actual: m.len(),
            });
        }
        if !m.iter().any(|&b| b) {
            return Err(TensorError::EmptyMask);
        }
    }
    Ok(())
}

/// Mean squared difference over the elements selected by `mask` (all
/// elements when `None`).
pub fn mse(
    a: &FeatureTensor,
    b: &FeatureTensor,
    mask: Option<&[bool]>,
) -> Result<f64, TensorError> {
    a.ensure_same_shape(b)?;
    check_mask(a, mask)?;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            let d = x as f64 - y as f64;
            sum += d * d;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// PSNR of `b` against the reference `a`, `10 log10(R^2 / MSE)` with
/// `R = max(a) - min(a)` over the whole reference.
pub fn psnr(
    a: &FeatureTensor,
    b: &FeatureTensor,
    mask: Option<&[bool]>,
) -> Result<DistortionReport, TensorError> {
    let mse = mse(a, b, mask)?;
    let (lo, hi) = a.min_max();
    let range = hi as f64 - lo as f64;
    Ok(DistortionReport {
        mse,
        psnr: psnr_from_mse(range, mse),
        dynamic_range: range,
    })
}

pub fn psnr_from_mse(range: f64, mse: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Infinite
    } else if range == 0.0 {
        Psnr::NegInfinite
    } else {
        Psnr::Db(10.0 * (range * range / mse).log10())
    }
}

/// Shannon entropy of the byte histogram, in bits per element.
pub fn empirical_entropy(bytes: &[u8]) -> f64 {
    if bytes.is_empty() {
        return 0.0;
    }
    let mut hist = [0u64; 256];
    for &b in bytes {
        hist[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    hist.iter()
        .filter(|&&h| h > 0)
        .map(|&h| {
            let p = h as f64 / n;
            -p * p.log2()
        })
        .sum()
}
