//! Per-neuron and aggregate sample statistics.
//!
//! Variances are population estimates (divide by `n`), the same convention
//! batch normalization uses at inference time.

use serde::{Deserialize, Serialize};

use crate::tensor::{FeatureTensor, Shape, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorStats {
    pub shape: Shape,
    /// Per-element-position mean, HWC order.
    pub per_neuron_mean: Vec<f64>,
    /// Per-element-position standard deviation, HWC order.
    pub per_neuron_std: Vec<f64>,
    pub aggregate_mean: f64,
    pub aggregate_std: f64,
    pub sample_count: usize,
}

impl TensorStats {
    /// Stats where every neuron shares the same `(mean, std)`.
    pub fn uniform(shape: Shape, mean: f64, std: f64, sample_count: usize) -> Self {
        Self {
            shape,
            per_neuron_mean: vec![mean; shape.len()],
            per_neuron_std: vec![std; shape.len()],
            aggregate_mean: mean,
            aggregate_std: std,
            sample_count,
        }
    }

    /// The per-neuron mean as a tensor.
    pub fn mean_tensor(&self) -> FeatureTensor {
        FeatureTensor::new(
            self.shape,
            self.per_neuron_mean.iter().map(|&m| m as f32).collect(),
        )
        .expect("stats shape is consistent")
    }

    /// Mean over spatial positions of the per-neuron means, one per channel.
    pub fn channel_means_of_mean(&self) -> Vec<f64> {
        let c = self.shape.channels;
        let mut sums = vec![0.0; c];
        for (i, m) in self.per_neuron_mean.iter().enumerate() {
            sums[i % c] += m;
        }
        let hw = (self.shape.height * self.shape.width) as f64;
        sums.into_iter().map(|s| s / hw).collect()
    }
}

/// Order-independent sum: sorting first makes the rounding identical for any
/// permutation of the inputs.
fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Collect per-neuron and aggregate statistics over `samples`.
///
/// The result is bitwise independent of sample order.
pub fn collect_stats(samples: &[FeatureTensor]) -> Result<TensorStats, TensorError> {
    if samples.len() < 2 {
        return Err(TensorError::TooFewSamples(samples.len()));
    }
    let first = &samples[0];
    for s in &samples[1..] {
        first.ensure_same_shape(s)?;
    }
    let shape = first.shape();
    let n = samples.len() as f64;
    let mut means = Vec::with_capacity(shape.len());
    let mut stds = Vec::with_capacity(shape.len());
    let mut column = vec![0.0f64; samples.len()];
    for i in 0..shape.len() {
        for (slot, s) in column.iter_mut().zip(samples) {
            *slot = s.data()[i] as f64;
        }
        let mean = sorted_sum(&mut column.clone()) / n;
        for v in column.iter_mut() {
            *v = (*v - mean) * (*v - mean);
        }
        let var = sorted_sum(&mut column) / n;
        means.push(mean);
        stds.push(var.sqrt());
    }

    let neurons = shape.len() as f64;
    let aggregate_mean = means.iter().sum::<f64>() / neurons;
    // total variance = mean within-neuron variance + spread of neuron means
    let aggregate_var = means
        .iter()
        .zip(&stds)
        .map(|(m, s)| s * s + (m - aggregate_mean) * (m - aggregate_mean))
        .sum::<f64>()
        / neurons;

    Ok(TensorStats {
        shape,
        per_neuron_mean: means,
        per_neuron_std: stds,
        aggregate_mean,
        aggregate_std: aggregate_var.sqrt(),
        sample_count: samples.len(),
    })
}
