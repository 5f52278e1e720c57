//! Split early/completion uplink FEC decoding for virtualized RAN.
//!
//! The crate models an edge site that runs latency-critical *early*
//! decoding (decodability prediction and MAC subheader pre-parsing) and a
//! remote site that can absorb latency-tolerant *completion* decoding over a
//! midhaul link. Everything runs in virtual time inside a deterministic
//! discrete-event loop.

pub mod bits;
pub mod channel;
pub mod error;
pub mod fec;
pub mod early;
pub mod link_adapt;
pub mod mac;
pub mod offload;
pub mod sched;
pub mod sim;
pub mod traffic;

pub use error::{Error, Result};
