use thiserror::Error;

use crate::types::{IspId, PeerId};

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown ISP {0}")]
    UnknownIsp(IspId),
    #[error("unknown peer {0}")]
    UnknownPeer(PeerId),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{n_peers} peers cannot be split evenly: {reason}")]
    Divisibility { n_peers: usize, reason: String },
    #[error("invalid estimator input: {0}")]
    Estimator(String),
    #[error("no completed peers to compute a slowdown from")]
    NoCompletions,
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("scenario file: {0}")]
    Toml(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
