//! Datagram transport for feature-tensor bitstreams and a deterministic
//! simulator for the link it runs over.

pub mod netsim;
pub mod protocol;
pub mod wire;

pub use netsim::{Endpoint, Event, LinkConfig, ScenarioConfig, Simulator};
pub use protocol::{BandwidthEstimator, DropRule, Reassembler, SendBuffer};
pub use wire::{Confirmation, MsgType, WireMessage};
