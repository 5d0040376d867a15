//! Uniform scalar quantization over a clip interval centred on the mean.
//!
//! The interval is `[mu - w*sigma, mu + w*sigma]`, split into `N` equal bins;
//! values reconstruct to bin midpoints. In aggregate mode one `(mu, sigma)`
//! covers the whole tensor; in per-neuron mode every element position uses
//! its own `(mu_i, sigma_i)` while `N` and `w` stay shared.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CutPoint, StubModel};
use crate::stats::TensorStats;
use crate::tensor::{FeatureTensor, Shape, TensorError};

/// Floor applied to per-neuron standard deviations.
pub const MIN_STD: f64 = 1e-6;
pub const MAX_LEVELS: u16 = 256;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("levels must be in 2..=256, got {0}")]
    Levels(u16),
    #[error("clip width must be positive and finite, got {0}")]
    ClipWidth(f64),
    #[error("stats shape {stats} does not match tensor {tensor}")]
    StatsShape { stats: Shape, tensor: Shape },
    #[error("symbol {symbol} at element {index} is out of range for {levels} levels")]
    Symbol {
        index: usize,
        symbol: u8,
        levels: u16,
    },
    #[error("quantized tensor has {actual} levels, spec expects {expected}")]
    LevelMismatch { expected: u16, actual: u16 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    #[default]
    Aggregate,
    PerNeuron,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct QuantizerSpec {
    levels: u16,
    clip_width: f64,
    #[serde(default)]
    mode: QuantMode,
}

#[derive(Deserialize)]
struct RawSpec {
    levels: u16,
    clip_width: f64,
    #[serde(default)]
    mode: QuantMode,
}

impl TryFrom<RawSpec> for QuantizerSpec {
    type Error = QuantError;

    fn try_from(r: RawSpec) -> Result<Self, Self::Error> {
        QuantizerSpec::new(r.levels, r.clip_width, r.mode)
    }
}

impl QuantizerSpec {
    pub fn new(levels: u16, clip_width: f64, mode: QuantMode) -> Result<Self, QuantError> {
        if !(2..=MAX_LEVELS).contains(&levels) {
            return Err(QuantError::Levels(levels));
        }
        if !(clip_width > 0.0 && clip_width.is_finite()) {
            return Err(QuantError::ClipWidth(clip_width));
        }
        Ok(Self {
            levels,
            clip_width,
            mode,
        })
    }

    pub fn levels(&self) -> u16 {
        self.levels
    }

    pub fn clip_width(&self) -> f64 {
        self.clip_width
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    /// `log2(N)`: the ideal packed symbol size.
    pub fn bits_per_element(&self) -> f64 {
        (self.levels as f64).log2()
    }

    /// f32 size over packed symbol size, without variable-length coding.
    pub fn compression_ratio(&self) -> f64 {
        32.0 / self.bits_per_element()
    }

    /// Symbol of the interval centre; also used as tile padding.
    pub fn mid_symbol(&self) -> u8 {
        (self.levels / 2) as u8
    }

    /// Symbol for a value already normalized to `(x - mu) / sigma`.
    #[inline]
    pub fn symbol_of_normalized(&self, z: f64) -> u8 {
        let n = self.levels as f64;
        let w = self.clip_width;
        let u = ((z + w) * n / (2.0 * w)).floor();
        u.clamp(0.0, n - 1.0) as u8
    }

    /// Bin midpoint in normalized units.
    #[inline]
    pub fn normalized_of_symbol(&self, q: u8) -> f64 {
        let w = self.clip_width;
        -w + (q as f64 + 0.5) * 2.0 * w / self.levels as f64
    }

    /// Scalar view with a fixed `(mean, std)`.
    pub fn scalar(&self, mean: f64, std: f64) -> ScalarQuantizer {
        ScalarQuantizer {
            spec: *self,
            mean,
            std: std.max(MIN_STD),
        }
    }
}

/// One `(mean, std)` pair bound to a spec.
#[derive(Debug, Clone, Copy)]
pub struct ScalarQuantizer {
    spec: QuantizerSpec,
    mean: f64,
    std: f64,
}

impl ScalarQuantizer {
    pub fn x_min(&self) -> f64 {
        self.mean - self.spec.clip_width * self.std
    }

    pub fn x_max(&self) -> f64 {
        self.mean + self.spec.clip_width * self.std
    }

    /// Bin width in input units.
    pub fn step(&self) -> f64 {
        2.0 * self.spec.clip_width * self.std / self.spec.levels as f64
    }

    #[inline]
    pub fn quantize(&self, x: f64) -> u8 {
        self.spec.symbol_of_normalized((x - self.mean) / self.std)
    }

    #[inline]
    pub fn reconstruct(&self, q: u8) -> f64 {
        self.mean + self.std * self.spec.normalized_of_symbol(q)
    }
}

/// Symbols of a quantized tensor, one byte per element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedTensor {
    shape: Shape,
    levels: u16,
    symbols: Vec<u8>,
}

impl QuantizedTensor {
    pub fn new(shape: Shape, levels: u16, symbols: Vec<u8>) -> Result<Self, QuantError> {
        if !(2..=MAX_LEVELS).contains(&levels) {
            return Err(QuantError::Levels(levels));
        }
        if symbols.len() != shape.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected: shape.len(),
                actual: symbols.len(),
            }
            .into());
        }
        if let Some(index) = symbols.iter().position(|&s| s as u16 >= levels) {
            return Err(QuantError::Symbol {
                index,
                symbol: symbols[index],
                levels,
            });
        }
        Ok(Self {
            shape,
            levels,
            symbols,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn levels(&self) -> u16 {
        self.levels
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.symbols[self.shape.index(y, x, c)]
    }
}

fn check_stats(spec: &QuantizerSpec, stats: &TensorStats, shape: Shape) -> Result<(), QuantError> {
    if spec.mode == QuantMode::PerNeuron && stats.shape != shape {
        return Err(QuantError::StatsShape {
            stats: stats.shape,
            tensor: shape,
        });
    }
    Ok(())
}

fn scalar_at(spec: &QuantizerSpec, stats: &TensorStats, i: usize) -> ScalarQuantizer {
    match spec.mode {
        QuantMode::Aggregate => spec.scalar(stats.aggregate_mean, stats.aggregate_std),
        QuantMode::PerNeuron => spec.scalar(stats.per_neuron_mean[i], stats.per_neuron_std[i]),
    }
}

pub fn quantize(
    t: &FeatureTensor,
    spec: &QuantizerSpec,
    stats: &TensorStats,
) -> Result<QuantizedTensor, QuantError> {
    check_stats(spec, stats, t.shape())?;
    let symbols = match spec.mode {
        QuantMode::Aggregate => {
            let q = scalar_at(spec, stats, 0);
            t.data().iter().map(|&x| q.quantize(x as f64)).collect()
        }
        QuantMode::PerNeuron => t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| scalar_at(spec, stats, i).quantize(x as f64))
            .collect(),
    };
    Ok(QuantizedTensor {
        shape: t.shape(),
        levels: spec.levels,
        symbols,
    })
}

pub fn dequantize(
    q: &QuantizedTensor,
    spec: &QuantizerSpec,
    stats: &TensorStats,
) -> Result<FeatureTensor, QuantError> {
    if q.levels != spec.levels {
        return Err(QuantError::LevelMismatch {
            expected: spec.levels,
            actual: q.levels,
        });
    }
    check_stats(spec, stats, q.shape)?;
    let mut data = Vec::with_capacity(q.symbols.len());
    for (i, &s) in q.symbols.iter().enumerate() {
        if s as u16 >= spec.levels {
            return Err(QuantError::Symbol {
                index: i,
                symbol: s,
                levels: spec.levels,
            });
        }
        data.push(scalar_at(spec, stats, i).reconstruct(s) as f32);
    }
    Ok(FeatureTensor::new(q.shape, data)?)
}

/// `dequantize(quantize(t))`.
pub fn round_trip(
    t: &FeatureTensor,
    spec: &QuantizerSpec,
    stats: &TensorStats,
) -> Result<FeatureTensor, QuantError> {
    dequantize(&quantize(t, spec, stats)?, spec, stats)
}

/// One cell of a `(levels, clip_width)` sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub levels: u16,
    pub clip_width: f64,
    pub agreement: f64,
    pub mse: f64,
}

/// Agreement and mean reconstruction MSE over a grid of quantizer settings.
/// Rows are ordered by level, then width.
pub fn sweep(
    model: &StubModel,
    corpus: &[u64],
    cut: CutPoint,
    levels: &[u16],
    widths: &[f64],
    mode: QuantMode,
    stats: &TensorStats,
) -> Result<Vec<SweepRow>, QuantError> {
    let clean = model.clean_run(corpus, cut);
    let mut rows = Vec::with_capacity(levels.len() * widths.len());
    for &n in levels {
        for &w in widths {
            let spec = QuantizerSpec::new(n, w, mode)?;
            let eval = model.evaluate(&clean, cut, |_, t| {
                let r = round_trip(t, &spec, stats).expect("spec validated");
                let e = crate::metrics::mse(t, &r, None).expect("same shape");
                (r, e)
            });
            rows.push(SweepRow {
                levels: n,
                clip_width: w,
                agreement: eval.agreement,
                mse: eval.mean_metric,
            });
        }
    }
    Ok(rows)
}
