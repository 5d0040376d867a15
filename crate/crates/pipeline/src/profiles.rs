//! Wall-clock measurement of per-strategy latency components.

use std::time::Instant;

use cisplit_core::model::{CutPoint, StubModel, CALIBRATION_ID_BASE, INPUT_SHAPE};
use cisplit_core::quantizer::QuantizerSpec;
use cisplit_core::stats::{collect_stats, TensorStats};
use cisplit_core::strategy::{StrategyError, StrategyKind, StrategyProfile};
use cisplit_core::tensor::FeatureTensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::CodecSetting;
use crate::transcode::{self, TranscodeError};

pub const MIN_FRAMES: usize = 20;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("need at least {MIN_FRAMES} frames, got {0}")]
    TooFewFrames(usize),
    #[error("client slowdown must be positive and finite, got {0}")]
    Slowdown(f64),
    #[error(transparent)]
    Transcode(#[from] TranscodeError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Tensor(#[from] cisplit_core::tensor::TensorError),
    #[error(transparent)]
    Model(#[from] cisplit_core::model::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileSettings {
    pub seed: u64,
    pub quantizer: QuantizerSpec,
    pub codec: CodecSetting,
    pub frames: usize,
    /// Client-side times are multiplied by this to stand in for a slower
    /// edge device; both halves otherwise run on the same machine.
    pub client_slowdown: f64,
    pub calibration_images: u64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

#[derive(Default)]
struct Samples {
    client: Vec<f64>,
    encode: Vec<f64>,
    decode: Vec<f64>,
    server: Vec<f64>,
    bytes: Vec<f64>,
}

impl Samples {
    fn profile(
        self,
        name: &str,
        kind: StrategyKind,
        slowdown: f64,
    ) -> Result<StrategyProfile, StrategyError> {
        let m = |v: Vec<f64>| if v.is_empty() { 0.0 } else { median(v) };
        StrategyProfile::new(
            name,
            kind,
            m(self.client) * slowdown,
            m(self.encode) * slowdown,
            m(self.decode),
            m(self.server),
            m(self.bytes),
        )
    }
}

fn full_model(model: &StubModel, input: &FeatureTensor) -> Result<Vec<f32>, ProfileError> {
    let t = model.forward_client(input, CutPoint::STAGE3)?;
    Ok(model.forward_server(&t, CutPoint::STAGE3)?)
}

/// Median component times (seconds) and payload sizes (bytes) for client
/// only, each cut point, and server only, in that order. The server-only
/// payload is the coded input image.
pub fn measure_profiles(s: &ProfileSettings) -> Result<Vec<StrategyProfile>, ProfileError> {
    if s.frames < MIN_FRAMES {
        return Err(ProfileError::TooFewFrames(s.frames));
    }
    if !(s.client_slowdown.is_finite() && s.client_slowdown > 0.0) {
        return Err(ProfileError::Slowdown(s.client_slowdown));
    }
    let model = StubModel::new(s.seed);
    let inputs: Vec<FeatureTensor> = (0..s.frames as u64)
        .map(|id| model.generate_input(id, (0.0, 0.0)))
        .collect();
    let input_stats: TensorStats = collect_stats(
        &(0..s.calibration_images)
            .map(|i| model.generate_input(CALIBRATION_ID_BASE + i, (0.0, 0.0)))
            .collect::<Vec<_>>(),
    )?;
    debug_assert_eq!(input_stats.shape, INPUT_SHAPE);
    // one untimed pass so lazy tables and caches are warm
    full_model(&model, &inputs[0])?;

    let mut out = Vec::new();
    let mut local = Samples::default();
    for x in &inputs {
        local.client.push(timed(|| full_model(&model, x)).1);
    }
    out.push(local.profile("client_only", StrategyKind::ClientOnly, s.client_slowdown)?);

    for cut in CutPoint::ALL {
        let stats = collect_stats(&model.calibration_tensors(cut, s.calibration_images))?;
        let mut sm = Samples::default();
        for x in &inputs {
            let (t, tc) = timed(|| model.forward_client(x, cut));
            let t = t?;
            let (b, te) = timed(|| transcode::encode_tensor(&t, &s.quantizer, &stats, s.codec));
            let b = b?;
            let (r, td) = timed(|| transcode::decode_tensor(b.bytes(), &s.quantizer, &stats));
            let r = r?;
            let (_, ts) = timed(|| model.forward_server(&r, cut));
            sm.client.push(tc);
            sm.encode.push(te);
            sm.decode.push(td);
            sm.server.push(ts);
            sm.bytes.push(b.len() as f64);
        }
        out.push(sm.profile(
            &cut.name(),
            StrategyKind::Split(cut.stage() as u8),
            s.client_slowdown,
        )?);
    }

    let mut remote = Samples::default();
    for x in &inputs {
        let (b, te) = timed(|| transcode::encode_tensor(x, &s.quantizer, &input_stats, s.codec));
        let b = b?;
        let (r, td) = timed(|| transcode::decode_tensor(b.bytes(), &s.quantizer, &input_stats));
        let r = r?;
        let (_, ts) = timed(|| full_model(&model, &r));
        remote.encode.push(te);
        remote.decode.push(td);
        remote.server.push(ts);
        remote.bytes.push(b.len() as f64);
    }
    out.push(remote.profile("server_only", StrategyKind::ServerOnly, s.client_slowdown)?);
    Ok(out)
}
