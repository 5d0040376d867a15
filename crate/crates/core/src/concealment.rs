//! Simulated tensor data loss and reconstruction of the missing part.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CutPoint, StubModel};
use crate::rng::XorShift64Star;
use crate::stats::TensorStats;
use crate::tensor::{FeatureTensor, Shape, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum ConcealError {
    #[error("loss rate must be in [0, 1], got {0}")]
    Rate(f64),
    #[error("{0} concealment needs per-channel side means")]
    MissingSideMeans(Concealment),
    #[error("{0} concealment needs dataset statistics")]
    MissingStats(Concealment),
    #[error("mask shape {mask} does not match tensor {tensor}")]
    MaskShape { mask: Shape, tensor: Shape },
    #[error("side means have {actual} channels, tensor has {expected}")]
    SideLength { expected: usize, actual: usize },
    #[error("unknown {what} '{value}'")]
    Unknown { what: &'static str, value: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    ByElement,
    ByChannel,
}

impl LossKind {
    pub const ALL: [LossKind; 2] = [LossKind::ByElement, LossKind::ByChannel];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::ByElement => "by_element",
            LossKind::ByChannel => "by_channel",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = ConcealError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ConcealError::Unknown {
                what: "loss kind",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concealment {
    Zero,
    ChannelMean,
    DatasetMean,
    Hybrid,
}

impl Concealment {
    pub const ALL: [Concealment; 4] = [
        Concealment::Zero,
        Concealment::ChannelMean,
        Concealment::DatasetMean,
        Concealment::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Concealment::Zero => "zero",
            Concealment::ChannelMean => "channel_mean",
            Concealment::DatasetMean => "dataset_mean",
            Concealment::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Concealment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Concealment {
    type Err = ConcealError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Concealment::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ConcealError::Unknown {
                what: "concealment strategy",
                value: s.to_string(),
            })
    }
}

/// Which elements of a tensor were lost.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMask {
    shape: Shape,
    missing: Vec<bool>,
    kind: LossKind,
    rate: f64,
    seed: u64,
}

impl LossMask {
    /// Mask from explicit per-element flags, e.g. from a partial decode.
    pub fn from_missing(
        shape: Shape,
        missing: Vec<bool>,
        kind: LossKind,
    ) -> Result<Self, ConcealError> {
        if missing.len() != shape.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected: shape.len(),
                actual: missing.len(),
            }
            .into());
        }
        let rate = missing.iter().filter(|&&m| m).count() as f64 / shape.len() as f64;
        Ok(Self {
            shape,
            missing,
            kind,
            rate,
            seed: 0,
        })
    }

    pub fn none(shape: Shape) -> Self {
        Self {
            shape,
            missing: vec![false; shape.len()],
            kind: LossKind::ByElement,
            rate: 0.0,
            seed: 0,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn missing(&self) -> &[bool] {
        &self.missing
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    /// Requested rate, or the realized fraction for explicit masks.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        self.missing_count() as f64 / self.missing.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        !self.missing.iter().any(|&m| m)
    }
}

/// Seeded loss pattern. By element, each element is lost with probability
/// `rate`; by channel, `ceil(rate * C)` whole channels are lost.
pub fn make_mask(
    shape: Shape,
    kind: LossKind,
    rate: f64,
    seed: u64,
) -> Result<LossMask, ConcealError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(ConcealError::Rate(rate));
    }
    let mut rng = XorShift64Star::new(seed);
    let missing = match kind {
        LossKind::ByElement => (0..shape.len()).map(|_| rng.chance(rate)).collect(),
        LossKind::ByChannel => {
            let c = shape.channels;
            // the small slack keeps products like 0.25 * 64 from rounding up
            let lost = ((rate * c as f64 - 1e-9).ceil().max(0.0) as usize).min(c);
            let mut order: Vec<usize> = (0..c).collect();
            rng.shuffle(&mut order);
            let mut dead = vec![false; c];
            for &ch in &order[..lost] {
                dead[ch] = true;
            }
            (0..shape.len()).map(|i| dead[i % c]).collect()
        }
    };
    Ok(LossMask {
        shape,
        missing,
        kind,
        rate,
        seed,
    })
}

/// Per-channel means of the intact tensor, sent alongside the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideChannelMeans {
    pub per_channel_mean: Vec<f64>,
}

impl SideChannelMeans {
    pub fn from_tensor(t: &FeatureTensor) -> Self {
        let c = t.channels();
        let mut sums = vec![0.0f64; c];
        for px in t.data().chunks_exact(c) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as f64;
            }
        }
        let hw = (t.height() * t.width()) as f64;
        Self {
            per_channel_mean: sums.into_iter().map(|s| s / hw).collect(),
        }
    }
}

/// Apply `mask` to `t`: missing elements become zero, as a receiver would
/// see them before concealment.
pub fn apply_loss(t: &FeatureTensor, mask: &LossMask) -> Result<FeatureTensor, ConcealError> {
    check_mask(t, mask)?;
    let mut out = t.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(&mask.missing) {
        if m {
            *v = 0.0;
        }
    }
    Ok(out)
}

fn check_mask(t: &FeatureTensor, mask: &LossMask) -> Result<(), ConcealError> {
    if mask.shape != t.shape() {
        return Err(ConcealError::MaskShape {
            mask: mask.shape,
            tensor: t.shape(),
        });
    }
    Ok(())
}

/// Fill the missing elements of `damaged`; others are left untouched.
pub fn conceal(
    damaged: &FeatureTensor,
    mask: &LossMask,
    strategy: Concealment,
    stats: Option<&TensorStats>,
    side: Option<&SideChannelMeans>,
) -> Result<FeatureTensor, ConcealError> {
    check_mask(damaged, mask)?;
    let shape = damaged.shape();
    let c = shape.channels;
    let need_side = || -> Result<&SideChannelMeans, ConcealError> {
        let s = side.ok_or(ConcealError::MissingSideMeans(strategy))?;
        if s.per_channel_mean.len() != c {
            return Err(ConcealError::SideLength {
                expected: c,
                actual: s.per_channel_mean.len(),
            });
        }
        Ok(s)
    };
    let need_stats = || -> Result<&TensorStats, ConcealError> {
        let s = stats.ok_or(ConcealError::MissingStats(strategy))?;
        if s.shape != shape {
            return Err(TensorError::ShapeMismatch {
                left: s.shape,
                right: shape,
            }
            .into());
        }
        Ok(s)
    };
    let fill: Vec<f64> = match strategy {
        Concealment::Zero => vec![0.0; shape.len()],
        Concealment::ChannelMean => {
            let s = need_side()?;
            (0..shape.len())
                .map(|i| s.per_channel_mean[i % c])
                .collect()
        }
        Concealment::DatasetMean => need_stats()?.per_neuron_mean.clone(),
        Concealment::Hybrid => {
            let s = need_side()?;
            let st = need_stats()?;
            let spatial = st.channel_means_of_mean();
            st.per_neuron_mean
                .iter()
                .enumerate()
                .map(|(i, &mu)| mu + (s.per_channel_mean[i % c] - spatial[i % c]))
                .collect()
        }
    };
    let mut out = damaged.clone();
    for ((v, &m), &f) in out.data_mut().iter_mut().zip(&mask.missing).zip(&fill) {
        if m {
            *v = f as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub kind: LossKind,
    pub rate: f64,
    pub strategy: Concealment,
    pub agreement: f64,
    pub mse: f64,
}

/// Agreement and reconstruction MSE for every `(rate, strategy)` pair.
/// Image `i` of the corpus gets mask seed `seed + i` at every rate, so
/// strategies are compared on identical losses.
#[allow(clippy::too_many_arguments)]
pub fn loss_sweep(
    model: &StubModel,
    corpus: &[u64],
    cut: CutPoint,
    kind: LossKind,
    rates: &[f64],
    strategies: &[Concealment],
    stats: &TensorStats,
    seed: u64,
) -> Result<Vec<LossRow>, ConcealError> {
    for &r in rates {
        if !(0.0..=1.0).contains(&r) {
            return Err(ConcealError::Rate(r));
        }
    }
    let clean = model.clean_run(corpus, cut);
    let mut rows = Vec::with_capacity(rates.len() * strategies.len());
    for &rate in rates {
        for &strategy in strategies {
            let eval = model.evaluate(&clean, cut, |i, t| {
                let mask = make_mask(t.shape(), kind, rate, seed.wrapping_add(i as u64))
                    .expect("rate checked");
                let side = SideChannelMeans::from_tensor(t);
                let damaged = apply_loss(t, &mask).expect("same shape");
                let r = conceal(&damaged, &mask, strategy, Some(stats), Some(&side))
                    .expect("inputs present");
                let mse = crate::metrics::mse(t, &r, None).expect("same shape");
                (r, mse)
            });
            rows.push(LossRow {
                kind,
                rate,
                strategy,
                agreement: eval.agreement,
                mse: eval.mean_metric,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::collect_stats;

    fn random(shape: Shape, seed: u64) -> FeatureTensor {
        let mut rng = XorShift64Star::new(seed);
        FeatureTensor::from_fn(shape, |_, _, c| (c as f64 + rng.uniform(-1.0, 1.0)) as f32)
    }

    fn stats_for(shape: Shape) -> TensorStats {
        let samples: Vec<_> = (0..6).map(|i| random(shape, 40 + i)).collect();
        collect_stats(&samples).unwrap()
    }

    #[test]
    fn mask_extremes_and_channel_count() {
        let shape = Shape::new(4, 4, 64);
        for kind in LossKind::ALL {
            assert!(make_mask(shape, kind, 0.0, 1).unwrap().is_empty());
            assert_eq!(
                make_mask(shape, kind, 1.0, 1).unwrap().missing_count(),
                shape.len()
            );
        }
        let m = make_mask(shape, LossKind::ByChannel, 0.25, 9).unwrap();
        assert_eq!(m.missing_count(), 16 * 16);
        for c in 0..64 {
            let first = m.missing()[c];
            assert!((0..16).all(|p| m.missing()[p * 64 + c] == first));
        }
        assert_eq!(
            make_mask(shape, LossKind::ByChannel, 0.01, 9)
                .unwrap()
                .missing_count(),
            16
        );
        assert_eq!(
            make_mask(shape, LossKind::ByElement, 1.5, 1),
            Err(ConcealError::Rate(1.5))
        );
    }

    #[test]
    fn element_rate_is_close() {
        let shape = Shape::new(32, 32, 16);
        for rate in [0.05, 0.2, 0.5] {
            let m = make_mask(shape, LossKind::ByElement, rate, 3).unwrap();
            assert!((m.missing_fraction() - rate).abs() < 0.02);
        }
    }

    #[test]
    fn same_seed_same_mask() {
        let shape = Shape::new(8, 8, 8);
        for kind in LossKind::ALL {
            assert_eq!(
                make_mask(shape, kind, 0.3, 5).unwrap(),
                make_mask(shape, kind, 0.3, 5).unwrap()
            );
            assert_ne!(
                make_mask(shape, kind, 0.3, 5).unwrap(),
                make_mask(shape, kind, 0.3, 6).unwrap()
            );
        }
    }

    #[test]
    fn rate_zero_is_identity_for_all_strategies() {
        let shape = Shape::new(3, 3, 4);
        let t = random(shape, 1);
        let stats = stats_for(shape);
        let side = SideChannelMeans::from_tensor(&t);
        let mask = make_mask(shape, LossKind::ByElement, 0.0, 1).unwrap();
        for s in Concealment::ALL {
            assert_eq!(conceal(&t, &mask, s, Some(&stats), Some(&side)).unwrap(), t);
        }
    }

    #[test]
    fn zero_fill_all_missing() {
        let shape = Shape::new(2, 3, 2);
        let t = random(shape, 2);
        let mask = make_mask(shape, LossKind::ByChannel, 1.0, 1).unwrap();
        let r = conceal(&t, &mask, Concealment::Zero, None, None).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_inputs_are_named() {
        let shape = Shape::new(2, 2, 2);
        let t = random(shape, 3);
        let mask = make_mask(shape, LossKind::ByElement, 0.5, 1).unwrap();
        let e = conceal(&t, &mask, Concealment::Hybrid, None, None).unwrap_err();
        assert_eq!(
            e.to_string(),
            "hybrid concealment needs per-channel side means"
        );
        let side = SideChannelMeans::from_tensor(&t);
        let e = conceal(&t, &mask, Concealment::Hybrid, None, Some(&side)).unwrap_err();
        assert_eq!(e, ConcealError::MissingStats(Concealment::Hybrid));
        assert!(matches!(
            conceal(&t, &mask, Concealment::DatasetMean, None, None),
            Err(ConcealError::MissingStats(Concealment::DatasetMean))
        ));
    }

    #[test]
    fn hybrid_collapses_to_channel_mean() {
        let shape = Shape::new(4, 5, 3);
        let t = random(shape, 4);
        let mut stats = stats_for(shape);
        for (i, m) in stats.per_neuron_mean.iter_mut().enumerate() {
            *m = [0.5, -1.25, 2.0][i % 3];
        }
        let side = SideChannelMeans::from_tensor(&t);
        let mask = make_mask(shape, LossKind::ByElement, 0.6, 8).unwrap();
        let damaged = apply_loss(&t, &mask).unwrap();
        let h = conceal(
            &damaged,
            &mask,
            Concealment::Hybrid,
            Some(&stats),
            Some(&side),
        )
        .unwrap();
        let c = conceal(
            &damaged,
            &mask,
            Concealment::ChannelMean,
            Some(&stats),
            Some(&side),
        )
        .unwrap();
        assert_eq!(h, c);
    }

    #[test]
    fn dataset_mean_mse_matches_oracle() {
        let shape = Shape::new(4, 4, 3);
        let stats = stats_for(shape);
        let t = random(shape, 77);
        let mask = make_mask(shape, LossKind::ByElement, 0.4, 2).unwrap();
        let r = conceal(
            &apply_loss(&t, &mask).unwrap(),
            &mask,
            Concealment::DatasetMean,
            Some(&stats),
            None,
        )
        .unwrap();
        let n = shape.len() as f64;
        let oracle: f64 = (0..shape.len())
            .filter(|&i| mask.missing()[i])
            .map(|i| (t.data()[i] as f64 - stats.per_neuron_mean[i]).powi(2))
            .sum::<f64>()
            / n;
        let got = crate::metrics::mse(&t, &r, None).unwrap();
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
        let zero = conceal(
            &apply_loss(&t, &mask).unwrap(),
            &mask,
            Concealment::Zero,
            None,
            None,
        )
        .unwrap();
        assert!(got <= crate::metrics::mse(&t, &zero, None).unwrap());
    }

    #[test]
    fn names_parse() {
        for s in Concealment::ALL {
            assert_eq!(s.name().parse::<Concealment>().unwrap(), s);
        }
        for k in LossKind::ALL {
            assert_eq!(k.to_string().parse::<LossKind>().unwrap(), k);
        }
        assert!("median".parse::<Concealment>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kept_elements_untouched(seed in any::<u64>(), rate in 0.0f64..=1.0, s in 0usize..4, by_channel: bool) {
                let shape = Shape::new(3, 4, 5);
                let t = random(shape, seed);
                let stats = stats_for(shape);
                let side = SideChannelMeans::from_tensor(&t);
                let kind = if by_channel { LossKind::ByChannel } else { LossKind::ByElement };
                let mask = make_mask(shape, kind, rate, seed).unwrap();
                let r = conceal(&apply_loss(&t, &mask).unwrap(), &mask, Concealment::ALL[s], Some(&stats), Some(&side)).unwrap();
                for i in 0..shape.len() {
                    if !mask.missing()[i] {
                        prop_assert_eq!(r.data()[i].to_bits(), t.data()[i].to_bits());
                    }
                }
            }
        }
    }
}
