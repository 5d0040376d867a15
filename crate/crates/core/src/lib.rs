//! Feature-tensor compression primitives for split inference.
//!
//! A client runs the first part of a model and ships the intermediate
//! feature tensor to a server, which finishes inference. This crate holds
//! the pieces in between: statistics and quantization of the tensor,
//! tiling into an 8-bit plane, a block-DCT codec, motion-compensated
//! prediction, loss concealment, and the latency model used to pick a
//! split strategy. A deterministic [`model::StubModel`] stands in for a
//! real network.

pub mod codec;
pub mod concealment;
pub mod io;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod quantizer;
pub mod rng;
pub mod stats;
pub mod strategy;
pub mod tensor;
pub mod tiler;

pub use metrics::{DistortionReport, Psnr};
pub use model::{CutPoint, StubModel};
pub use stats::TensorStats;
pub use tensor::{FeatureTensor, Shape, TensorError};
