//! Deterministic synthetic split model.
//!
//! Three stages of `3x3 conv (same, zero pad) -> 2x2 average pool -> per-channel
//! affine normalization -> ReLU` (no ReLU after the last stage), followed by a
//! global-average-pool linear head over ten classes. Everything is derived
//! from one seed. Normalization is calibrated once on a fixed 64-image corpus
//! and frozen, like batch normalization in inference mode.
//!
//! Because every layer is either a convolution applied identically at each
//! position or a stride-2 average pool, translating the input by `k * 2^s`
//! pixels translates the stage-`s` output by exactly `k` pixels away from the
//! borders, bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::XorShift64Star;
use crate::tensor::{FeatureTensor, Shape};

pub const INPUT_SIZE: usize = 64;
pub const INPUT_CHANNELS: usize = 3;
pub const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];
pub const NUM_CLASSES: usize = 10;
pub const CALIBRATION_IMAGES: u64 = 64;
/// Image ids at or above this base are reserved for calibration.
pub const CALIBRATION_ID_BASE: u64 = 1 << 40;

const BLOBS_PER_IMAGE: usize = 14;
const WAVES_PER_IMAGE: usize = 2;

pub const INPUT_SHAPE: Shape = Shape::new(INPUT_SIZE, INPUT_SIZE, INPUT_CHANNELS);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("expected input shape {expected}, got {actual}")]
    InputShape { expected: Shape, actual: Shape },
    #[error("tensor shape {actual} does not match cut {cut} ({expected})")]
    CutShape {
        cut: String,
        expected: Shape,
        actual: Shape,
    },
    #[error("unknown cut point {0:?}; expected stage1, stage2 or stage3")]
    UnknownCut(String),
}

/// A named split location: the output of stage 1, 2 or 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CutPoint {
    stage: u8,
}

impl CutPoint {
    pub const STAGE1: CutPoint = CutPoint { stage: 1 };
    pub const STAGE2: CutPoint = CutPoint { stage: 2 };
    pub const STAGE3: CutPoint = CutPoint { stage: 3 };
    pub const ALL: [CutPoint; 3] = [Self::STAGE1, Self::STAGE2, Self::STAGE3];

    pub fn new(stage: u8) -> Option<Self> {
        (1..=3).contains(&stage).then_some(Self { stage })
    }

    pub fn stage(self) -> usize {
        self.stage as usize
    }

    pub fn name(self) -> String {
        format!("stage{}", self.stage)
    }

    /// Input pixels per tensor pixel.
    pub fn stride(self) -> usize {
        1 << self.stage
    }

    pub fn output_shape(self) -> Shape {
        let side = INPUT_SIZE >> self.stage;
        Shape::new(side, side, STAGE_CHANNELS[self.stage() - 1])
    }

    /// Multiply-accumulate count of all stages up to and including this one.
    pub fn cumulative_cost(self) -> u64 {
        let mut cin = INPUT_CHANNELS;
        let mut side = INPUT_SIZE;
        let mut total = 0u64;
        for &cout in &STAGE_CHANNELS[..self.stage()] {
            total += (side * side * cout * 9 * cin) as u64;
            cin = cout;
            side /= 2;
        }
        total
    }

    /// Raw f32 payload size of the cut tensor.
    pub fn raw_bytes(self) -> usize {
        self.output_shape().len() * 4
    }

    /// Tensor pixels at each border that may see zero padding or out-of-frame
    /// content; the receptive-field radius expressed in tensor pixels.
    pub fn border_width(self) -> usize {
        // each conv adds one pixel of radius at its own input resolution
        let radius: usize = (0..self.stage()).map(|s| 1 << s).sum();
        radius.div_ceil(self.stride())
    }
}

impl std::fmt::Display for CutPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage{}", self.stage)
    }
}

impl std::str::FromStr for CutPoint {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix("stage")
            .and_then(|n| n.parse::<u8>().ok())
            .and_then(CutPoint::new)
            .ok_or_else(|| ModelError::UnknownCut(s.to_string()))
    }
}

impl TryFrom<String> for CutPoint {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<CutPoint> for String {
    fn from(c: CutPoint) -> String {
        c.name()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CutProfile {
    pub cut: CutPoint,
    pub shape: Shape,
    pub cumulative_cost: u64,
    pub raw_bytes: usize,
}

/// Cut-point manifest consumed by the pipeline and CLI.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelManifest {
    pub seed: u64,
    pub input: Shape,
    pub classes: usize,
    pub cuts: Vec<CutProfile>,
}

pub fn profile_cuts() -> Vec<CutProfile> {
    CutPoint::ALL
        .iter()
        .map(|&cut| CutProfile {
            cut,
            shape: cut.output_shape(),
            cumulative_cost: cut.cumulative_cost(),
            raw_bytes: cut.raw_bytes(),
        })
        .collect()
}

/// Continuous blob-and-wave pattern for one image.
#[derive(Debug, Clone)]
struct Pattern {
    blobs: Vec<Blob>,
    waves: Vec<Wave>,
    background: [f64; INPUT_CHANNELS],
}

#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    inv_two_var: f64,
    amp: [f64; INPUT_CHANNELS],
}

#[derive(Debug, Clone)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: [f64; INPUT_CHANNELS],
}

impl Pattern {
    fn new(seed: u64, image_id: u64) -> Self {
        let mut rng = XorShift64Star::derive(seed, image_id);
        let rgb = |rng: &mut XorShift64Star, scale: f64| {
            [
                rng.uniform(-scale, scale),
                rng.uniform(-scale, scale),
                rng.uniform(-scale, scale),
            ]
        };
        let background = rgb(&mut rng, 0.3);
        let blobs = (0..BLOBS_PER_IMAGE)
            .map(|_| {
                let sigma = rng.uniform(2.5, 10.0);
                Blob {
                    cx: rng.uniform(-24.0, 88.0),
                    cy: rng.uniform(-24.0, 88.0),
                    inv_two_var: 1.0 / (2.0 * sigma * sigma),
                    amp: rgb(&mut rng, 1.0),
                }
            })
            .collect();
        let waves = (0..WAVES_PER_IMAGE)
            .map(|_| {
                let freq = rng.uniform(0.03, 0.2) * std::f64::consts::TAU;
                let angle = rng.uniform(0.0, std::f64::consts::TAU);
                Wave {
                    kx: freq * angle.cos(),
                    ky: freq * angle.sin(),
                    phase: rng.uniform(0.0, std::f64::consts::TAU),
                    amp: rgb(&mut rng, 0.25),
                }
            })
            .collect();
        Self {
            blobs,
            waves,
            background,
        }
    }

    fn sample(&self, u: f64, v: f64) -> [f64; INPUT_CHANNELS] {
        let mut out = self.background;
        for b in &self.blobs {
            let d2 = (u - b.cx) * (u - b.cx) + (v - b.cy) * (v - b.cy);
            let g = (-d2 * b.inv_two_var).exp();
            for (o, a) in out.iter_mut().zip(&b.amp) {
                *o += a * g;
            }
        }
        for w in &self.waves {
            let s = (w.kx * u + w.ky * v + w.phase).sin();
            for (o, a) in out.iter_mut().zip(&w.amp) {
                *o += a * s;
            }
        }
        out
    }
}

/// Weights of one `3x3` convolution, laid out `[ky][kx][cin][cout]`.
#[derive(Debug, Clone)]
struct ConvBank {
    cin: usize,
    cout: usize,
    weights: Vec<f32>,
}

impl ConvBank {
    fn new(rng: &mut XorShift64Star, cin: usize, cout: usize) -> Self {
        let bound = (6.0 / (9.0 * cin as f64)).sqrt();
        let weights = (0..9 * cin * cout)
            .map(|_| rng.uniform(-bound, bound) as f32)
            .collect();
        Self { cin, cout, weights }
    }

    fn apply(&self, input: &FeatureTensor) -> FeatureTensor {
        let (h, w) = (input.height(), input.width());
        debug_assert_eq!(input.channels(), self.cin);
        let mut out = vec![0.0f32; h * w * self.cout];
        let src = input.data();
        for y in 0..h {
            for x in 0..w {
                let acc = &mut out[(y * w + x) * self.cout..][..self.cout];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let pixel = &src[(sy as usize * w + sx as usize) * self.cin..][..self.cin];
                        let taps = &self.weights[(ky * 3 + kx) * self.cin * self.cout..];
                        for (ci, &v) in pixel.iter().enumerate() {
                            let row = &taps[ci * self.cout..][..self.cout];
                            for (a, &k) in acc.iter_mut().zip(row) {
                                *a += k * v;
                            }
                        }
                    }
                }
            }
        }
        FeatureTensor::new(Shape::new(h, w, self.cout), out).expect("conv shape")
    }
}

fn average_pool(input: &FeatureTensor) -> FeatureTensor {
    let s = input.shape();
    let out = Shape::new(s.height / 2, s.width / 2, s.channels);
    FeatureTensor::from_fn(out, |y, x, c| {
        let (y0, x0) = (2 * y, 2 * x);
        (input.get(y0, x0, c)
            + input.get(y0, x0 + 1, c)
            + input.get(y0 + 1, x0, c)
            + input.get(y0 + 1, x0 + 1, c))
            * 0.25
    })
}

/// Frozen per-channel `(x - mean) * inv_std`.
#[derive(Debug, Clone)]
struct ChannelNorm {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl ChannelNorm {
    fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            inv_std: vec![1.0; channels],
        }
    }

    fn fit(samples: &[FeatureTensor]) -> Self {
        let c = samples[0].channels();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut n = 0usize;
        for t in samples {
            for px in t.data().chunks_exact(c) {
                for (i, &v) in px.iter().enumerate() {
                    sum[i] += v as f64;
                    sq[i] += v as f64 * v as f64;
                }
            }
            n += t.height() * t.width();
        }
        let mut mean = Vec::with_capacity(c);
        let mut inv_std = Vec::with_capacity(c);
        for i in 0..c {
            let m = sum[i] / n as f64;
            let var = (sq[i] / n as f64 - m * m).max(1e-12);
            mean.push(m as f32);
            inv_std.push((1.0 / var.sqrt()) as f32);
        }
        Self { mean, inv_std }
    }

    fn apply(&self, t: &mut FeatureTensor, relu: bool) {
        let c = t.channels();
        for px in t.data_mut().chunks_exact_mut(c) {
            for (i, v) in px.iter_mut().enumerate() {
                let z = (*v - self.mean[i]) * self.inv_std[i];
                *v = if relu { z.max(0.0) } else { z };
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub agreement: f64,
    pub mean_metric: f64,
}

/// Class scores produced by the server-side head.
pub type Scores = Vec<f32>;

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct StubModel {
    seed: u64,
    convs: Vec<ConvBank>,
    norms: Vec<ChannelNorm>,
    head_weights: Vec<f32>,
    head_bias: Vec<f32>,
}

impl StubModel {
    /// Build the model for `seed` and calibrate its normalization layers.
    pub fn new(seed: u64) -> Self {
        let mut rng = XorShift64Star::derive(seed, 0xC0DE);
        let mut cin = INPUT_CHANNELS;
        let convs: Vec<_> = STAGE_CHANNELS
            .iter()
            .map(|&cout| {
                let bank = ConvBank::new(&mut rng, cin, cout);
                cin = cout;
                bank
            })
            .collect();
        let feat = STAGE_CHANNELS[2];
        let scale = (3.0 / feat as f64).sqrt();
        let head_weights = (0..NUM_CLASSES * feat)
            .map(|_| rng.uniform(-scale, scale) as f32)
            .collect();
        let head_bias = (0..NUM_CLASSES)
            .map(|_| rng.uniform(-0.05, 0.05) as f32)
            .collect();
        let mut model = Self {
            seed,
            norms: STAGE_CHANNELS
                .iter()
                .map(|&c| ChannelNorm::identity(c))
                .collect(),
            convs,
            head_weights,
            head_bias,
        };
        model.calibrate();
        model
    }

    fn calibrate(&mut self) {
        let mut acts: Vec<FeatureTensor> = (0..CALIBRATION_IMAGES)
            .into_par_iter()
            .map(|i| self.generate_input(CALIBRATION_ID_BASE + i, (0.0, 0.0)))
            .collect();
        for stage in 0..STAGE_CHANNELS.len() {
            let pre: Vec<FeatureTensor> = acts
                .par_iter()
                .map(|t| average_pool(&self.convs[stage].apply(t)))
                .collect();
            self.norms[stage] = ChannelNorm::fit(&pre);
            acts = pre;
            for t in acts.iter_mut() {
                self.norms[stage].apply(t, stage + 1 < STAGE_CHANNELS.len());
            }
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn head_bias(&self) -> &[f32] {
        &self.head_bias
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            seed: self.seed,
            input: INPUT_SHAPE,
            classes: NUM_CLASSES,
            cuts: profile_cuts(),
        }
    }

    /// Procedural `64x64x3` input. `translation` offsets the sampling window
    /// into the underlying continuous pattern: pixel `(y, x)` samples the
    /// pattern at `(y + dy, x + dx)`, so `cur(y, x) = ref(y + dy, x + dx)`.
    pub fn generate_input(&self, image_id: u64, translation: (f64, f64)) -> FeatureTensor {
        let pattern = Pattern::new(self.seed, image_id);
        let (dx, dy) = translation;
        let mut data = Vec::with_capacity(INPUT_SHAPE.len());
        for y in 0..INPUT_SIZE {
            for x in 0..INPUT_SIZE {
                let px = pattern.sample(x as f64 + dx, y as f64 + dy);
                data.extend(px.iter().map(|&v| v as f32));
            }
        }
        FeatureTensor::new(INPUT_SHAPE, data).expect("input shape")
    }

    fn run_stage(&self, stage: usize, input: &FeatureTensor) -> FeatureTensor {
        let mut t = average_pool(&self.convs[stage].apply(input));
        self.norms[stage].apply(&mut t, stage + 1 < STAGE_CHANNELS.len());
        t
    }

    /// Client half: stages `1..=cut`.
    pub fn forward_client(
        &self,
        input: &FeatureTensor,
        cut: CutPoint,
    ) -> Result<FeatureTensor, ModelError> {
        if input.shape() != INPUT_SHAPE {
            return Err(ModelError::InputShape {
                expected: INPUT_SHAPE,
                actual: input.shape(),
            });
        }
        let mut t = self.run_stage(0, input);
        for stage in 1..cut.stage() {
            t = self.run_stage(stage, &t);
        }
        Ok(t)
    }

    /// Server half: remaining stages, global average pool and linear head.
    pub fn forward_server(
        &self,
        tensor: &FeatureTensor,
        cut: CutPoint,
    ) -> Result<Scores, ModelError> {
        if tensor.shape() != cut.output_shape() {
            return Err(ModelError::CutShape {
                cut: cut.name(),
                expected: cut.output_shape(),
                actual: tensor.shape(),
            });
        }
        let mut owned;
        let mut t = tensor;
        for stage in cut.stage()..STAGE_CHANNELS.len() {
            owned = self.run_stage(stage, t);
            t = &owned;
        }
        let c = t.channels();
        let mut pooled = vec![0.0f32; c];
        for px in t.data().chunks_exact(c) {
            for (p, &v) in pooled.iter_mut().zip(px) {
                *p += v;
            }
        }
        let area = (t.height() * t.width()) as f32;
        for p in pooled.iter_mut() {
            *p /= area;
        }
        Ok(self
            .head_bias
            .iter()
            .enumerate()
            .map(|(k, &b)| {
                let row = &self.head_weights[k * c..][..c];
                b + row.iter().zip(&pooled).map(|(w, p)| w * p).sum::<f32>()
            })
            .collect())
    }

    /// Full uncompressed pipeline.
    pub fn classify(&self, image_id: u64) -> usize {
        let x = self.generate_input(image_id, (0.0, 0.0));
        let t = self
            .forward_client(&x, CutPoint::STAGE3)
            .expect("input shape");
        argmax(
            &self
                .forward_server(&t, CutPoint::STAGE3)
                .expect("cut shape"),
        )
    }

    /// Clean cut tensor for `image_id`.
    pub fn cut_tensor(&self, image_id: u64, cut: CutPoint) -> FeatureTensor {
        let x = self.generate_input(image_id, (0.0, 0.0));
        self.forward_client(&x, cut).expect("input shape")
    }

    /// Fraction of `corpus` whose argmax under `degrade` matches the clean
    /// pipeline. `degrade` receives the image id and the clean cut tensor.
    pub fn agreement<F>(&self, corpus: &[u64], cut: CutPoint, degrade: F) -> f64
    where
        F: Fn(u64, &FeatureTensor) -> FeatureTensor + Sync,
    {
        assert!(!corpus.is_empty(), "empty corpus");
        let hits: usize = corpus
            .par_iter()
            .map(|&id| {
                let t = self.cut_tensor(id, cut);
                let clean = argmax(&self.forward_server(&t, cut).expect("cut shape"));
                let degraded = degrade(id, &t);
                let got = argmax(&self.forward_server(&degraded, cut).expect("degraded shape"));
                usize::from(got == clean)
            })
            .sum();
        hits as f64 / corpus.len() as f64
    }

    /// Per-image clean argmax and cut tensor, for experiments that reuse them.
    pub fn clean_run(&self, corpus: &[u64], cut: CutPoint) -> Vec<(FeatureTensor, usize)> {
        corpus
            .par_iter()
            .map(|&id| {
                let t = self.cut_tensor(id, cut);
                let class = argmax(&self.forward_server(&t, cut).expect("cut shape"));
                (t, class)
            })
            .collect()
    }

    /// Run `degrade` over precomputed clean results. `degrade` gets the corpus
    /// position and the clean tensor, and returns the degraded tensor plus a
    /// scalar metric that is averaged into [`Evaluation::mean_metric`].
    pub fn evaluate<F>(
        &self,
        clean: &[(FeatureTensor, usize)],
        cut: CutPoint,
        degrade: F,
    ) -> Evaluation
    where
        F: Fn(usize, &FeatureTensor) -> (FeatureTensor, f64) + Sync,
    {
        assert!(!clean.is_empty(), "empty corpus");
        let per_item: Vec<(bool, f64)> = clean
            .par_iter()
            .enumerate()
            .map(|(i, (t, class))| {
                let (degraded, metric) = degrade(i, t);
                let got = argmax(&self.forward_server(&degraded, cut).expect("degraded shape"));
                (got == *class, metric)
            })
            .collect();
        let n = per_item.len() as f64;
        Evaluation {
            agreement: per_item.iter().filter(|(hit, _)| *hit).count() as f64 / n,
            mean_metric: per_item.iter().map(|(_, m)| m).sum::<f64>() / n,
        }
    }

    /// Cut tensors of the first `n` calibration images, a corpus disjoint from
    /// evaluation ids.
    pub fn calibration_tensors(&self, cut: CutPoint, n: u64) -> Vec<FeatureTensor> {
        (0..n)
            .into_par_iter()
            .map(|i| self.cut_tensor(CALIBRATION_ID_BASE + i, cut))
            .collect()
    }
}
