//! Discrete-event engine and fluid bandwidth model.

mod engine;
pub mod event;
pub mod flow;
pub mod log;

use serde::{Deserialize, Serialize};

pub use engine::{run, RunResult};
pub use event::{Event, EventKind, EventQueue};
pub use flow::{Flow, FlowGraph, RateAssignment};
pub use log::{EventLog, LogLevel, LogRecord, Record};

use crate::error::{Error, Result};
use crate::types::{BytesPerSec, IspId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interconnect {
    /// Every pair of ISPs peers directly.
    #[default]
    FullMeshPeering,
    /// Each ISP reaches the others over one transit link.
    SingleTransit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkCap {
    pub isp: IspId,
    /// Bound on the aggregate rate of flows leaving the ISP.
    pub cap: BytesPerSec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Topology {
    pub n_isps: usize,
    #[serde(default)]
    pub interpretation: Interconnect,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub link_caps: Vec<LinkCap>,
}

impl Topology {
    pub fn uncapped(n_isps: usize) -> Self {
        Topology {
            n_isps,
            interpretation: Interconnect::FullMeshPeering,
            link_caps: Vec::new(),
        }
    }

    /// The same outbound cap on every ISP.
    pub fn with_uniform_cap(n_isps: usize, cap: BytesPerSec) -> Self {
        Topology {
            n_isps,
            interpretation: Interconnect::SingleTransit,
            link_caps: (0..n_isps as u32).map(|i| LinkCap { isp: IspId(i), cap }).collect(),
        }
    }

    pub fn caps_by_isp(&self) -> Vec<Option<BytesPerSec>> {
        let mut caps = vec![None; self.n_isps];
        for c in &self.link_caps {
            caps[c.isp.index()] = Some(c.cap);
        }
        caps
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_isps == 0 {
            return Err(Error::config("topology needs at least one ISP"));
        }
        for c in &self.link_caps {
            if c.isp.index() >= self.n_isps {
                return Err(Error::UnknownIsp(c.isp));
            }
            if !(c.cap > 0.0) {
                return Err(Error::config(format!("link cap of {} must be positive", c.isp)));
            }
        }
        Ok(())
    }
}
