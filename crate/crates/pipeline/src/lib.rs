//! End-to-end split inference: simulated sessions, profile measurement and
//! the experiment drivers behind the `cisplit` command.

pub mod config;
pub mod experiments;
pub mod profiles;
pub mod session;
pub mod transcode;

pub use config::{CodecSetting, ConcealSetting, PipelineConfig};
pub use session::{run_session, ResultRecord, SessionOutcome, SessionReport};
