//! Flow-level BitTorrent swarm simulator with an ISP-locality-aware tracker.
//!
//! The crate is organised bottom-up: [`tracker`] and [`peer`] hold protocol
//! state, [`netsim`] drives them with a discrete-event loop over a fluid
//! bandwidth model, [`scenario`] builds configurations, [`metrics`] turns
//! run output into overhead / 95th percentile / slowdown figures and
//! [`estimator`] extrapolates inter-AS traffic to whole torrent censuses.

pub mod error;
pub mod estimator;
pub mod metrics;
pub mod netsim;
pub mod peer;
pub mod report;
pub mod scenario;
pub mod sweep;
pub mod tracker;
pub mod types;

pub use error::{Error, Result};
pub use netsim::{run, RunResult};
pub use scenario::ScenarioConfig;
pub use types::{Bytes, BytesPerSec, IspId, PeerId, Seconds, BIN_SECONDS, KB};
