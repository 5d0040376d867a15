use cisplit_core::concealment::Concealment;
use cisplit_core::model::CutPoint;
use cisplit_core::quantizer::{QuantMode, QuantizerSpec};
use cisplit_net::netsim::ScenarioConfig;
use cisplit_net::protocol::{DropRule, DEFAULT_MSS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("quality must be in 1..=100, got {0}")]
    Quality(u8),
    #[error("top_k must be in 1..={max}, got {got}")]
    TopK { got: usize, max: usize },
    #[error("frame interval must be positive")]
    FrameInterval,
    #[error("mss {0} is outside 64..=65535")]
    Mss(usize),
    #[error("config is neither a pipeline config nor a bare scenario: {0}")]
    Parse(serde_json::Error),
    #[error(transparent)]
    Link(#[from] cisplit_net::netsim::ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecSetting {
    Quality(u8),
    TargetBytes(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcealSetting {
    /// Frames with gaps are marked failed.
    None,
    Zero,
    ChannelMean,
    DatasetMean,
    Hybrid,
}

impl ConcealSetting {
    pub fn strategy(self) -> Option<Concealment> {
        match self {
            ConcealSetting::None => None,
            ConcealSetting::Zero => Some(Concealment::Zero),
            ConcealSetting::ChannelMean => Some(Concealment::ChannelMean),
            ConcealSetting::DatasetMean => Some(Concealment::DatasetMean),
            ConcealSetting::Hybrid => Some(Concealment::Hybrid),
        }
    }
}

fn default_quantizer() -> QuantizerSpec {
    QuantizerSpec::new(256, 4.0, QuantMode::Aggregate).expect("valid default")
}

fn default_cut() -> CutPoint {
    CutPoint::STAGE2
}

fn default_codec() -> CodecSetting {
    CodecSetting::Quality(90)
}

fn default_conceal() -> ConcealSetting {
    ConcealSetting::DatasetMean
}

fn default_frames() -> usize {
    100
}

fn default_interval() -> u64 {
    100_000
}

fn default_client_compute() -> u64 {
    10_000
}

fn default_server_compute() -> u64 {
    5_000
}

fn default_mss() -> usize {
    DEFAULT_MSS
}

fn default_top_k() -> usize {
    5
}

fn default_calibration() -> u64 {
    64
}

fn default_model_seed() -> u64 {
    7
}

fn default_link() -> ScenarioConfig {
    ScenarioConfig {
        bandwidth_bps: 1e6,
        rtt_us: 20_000,
        loss_prob: 0.0,
        jitter_us: 0,
        seed: 1,
        duration_us: 10_000_000,
    }
}

/// Everything a simulated session needs. Compute times are simulated, not
/// measured, so reports are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_cut")]
    pub cut: CutPoint,
    #[serde(default = "default_quantizer")]
    pub quantizer: QuantizerSpec,
    #[serde(default = "default_codec")]
    pub codec: CodecSetting,
    #[serde(default = "default_conceal")]
    pub concealment: ConcealSetting,
    #[serde(default = "default_link")]
    pub link: ScenarioConfig,
    #[serde(default)]
    pub server_rate_limit_us: u64,
    #[serde(default = "default_model_seed")]
    pub seed: u64,
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// First image id; frame `k` shows image `first_image + k`.
    #[serde(default)]
    pub first_image: u64,
    #[serde(default = "default_interval")]
    pub frame_interval_us: u64,
    #[serde(default = "default_client_compute")]
    pub client_compute_us: u64,
    #[serde(default = "default_server_compute")]
    pub server_compute_us: u64,
    #[serde(default = "default_mss")]
    pub mss: usize,
    #[serde(default)]
    pub drop_rule: DropRule,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_calibration")]
    pub calibration_images: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::from_scenario(default_link())
    }
}

impl PipelineConfig {
    pub fn from_scenario(link: ScenarioConfig) -> Self {
        Self {
            cut: default_cut(),
            quantizer: default_quantizer(),
            codec: default_codec(),
            concealment: default_conceal(),
            link,
            server_rate_limit_us: 0,
            seed: default_model_seed(),
            frames: default_frames(),
            first_image: 0,
            frame_interval_us: default_interval(),
            client_compute_us: default_client_compute(),
            server_compute_us: default_server_compute(),
            mss: default_mss(),
            drop_rule: DropRule::default(),
            top_k: default_top_k(),
            calibration_images: default_calibration(),
        }
    }

    /// Parse a pipeline config, or a bare link scenario whose duration sets
    /// the frame count.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg = match serde_json::from_str::<PipelineConfig>(text) {
            Ok(c) => c,
            Err(e) => {
                let s: ScenarioConfig =
                    serde_json::from_str(text).map_err(|_| ConfigError::Parse(e))?;
                let mut c = Self::from_scenario(s);
                c.frames = (s.duration_us / c.frame_interval_us).max(1) as usize;
                c
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let CodecSetting::Quality(q) = self.codec {
            if !(1..=100).contains(&q) {
                return Err(ConfigError::Quality(q));
            }
        }
        let max = cisplit_core::model::NUM_CLASSES;
        if !(1..=max).contains(&self.top_k) {
            return Err(ConfigError::TopK {
                got: self.top_k,
                max,
            });
        }
        if self.frame_interval_us == 0 {
            return Err(ConfigError::FrameInterval);
        }
        if !(64..=u16::MAX as usize).contains(&self.mss) {
            return Err(ConfigError::Mss(self.mss));
        }
        self.link.links()?;
        Ok(())
    }

    pub fn image_ids(&self) -> Vec<u64> {
        (0..self.frames as u64)
            .map(|k| self.first_image + k)
            .collect()
    }
}
