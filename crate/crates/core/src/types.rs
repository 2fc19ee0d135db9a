use std::fmt;

use serde::{Deserialize, Serialize};

/// Simulated time in seconds since the start of a run.
pub type Seconds = f64;

/// Byte quantities are fluid in the flow model.
pub type Bytes = f64;

/// Upload capacity in bytes per second.
pub type BytesPerSec = f64;

/// One kilobyte as used for capacities ("20 kB/s").
pub const KB: f64 = 1024.0;

/// Length of a metrics bin (transit billing granularity).
pub const BIN_SECONDS: Seconds = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PeerId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IspId(pub u32);

impl PeerId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl IspId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

impl fmt::Display for IspId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "isp{}", self.0)
    }
}

/// Index of the 5-minute bin containing `t`.
pub fn bin_of(t: Seconds) -> usize {
    if t <= 0.0 {
        0
    } else {
        (t / BIN_SECONDS).floor() as usize
    }
}

/// Handle of an active transfer in the flow graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlowId(pub u32);
