//! Structured run log.
//!
//! One JSON object per line: `{"time": .., "kind": .., ...fields}`. The
//! schema is versioned by [`LOG_SCHEMA_VERSION`].

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::tracker::{TrackerAction, TrackerDecision};
use crate::types::{IspId, PeerId, Seconds};

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogLevel {
    /// Lifecycle, starvation, PM and tracker decisions.
    #[default]
    Summary,
    /// Adds connections, choke transitions and piece completions.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Join {
        peer: PeerId,
        isp: IspId,
        seed: bool,
    },
    Complete {
        peer: PeerId,
        isp: IspId,
    },
    Depart {
        peer: PeerId,
        isp: IspId,
        crash: bool,
    },
    Starved {
        peer: PeerId,
        isp: IspId,
        pieces: usize,
    },
    Unstarved {
        peer: PeerId,
        isp: IspId,
    },
    PmFire {
        peer: PeerId,
        isp: IspId,
    },
    Tracker {
        isp: IspId,
        action: TrackerAction,
        peer: PeerId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<PeerId>,
    },
    Connect {
        peer: PeerId,
        other: PeerId,
        outside: bool,
    },
    Unchoke {
        peer: PeerId,
        other: PeerId,
    },
    Choke {
        peer: PeerId,
        other: PeerId,
    },
    Piece {
        peer: PeerId,
        from: PeerId,
        piece: usize,
    },
    Disruption {
        index: usize,
        crashed: Vec<PeerId>,
    },
    BinClose {
        bin: usize,
    },
    Stalled {
        peers: Vec<PeerId>,
    },
    End {
        events: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub time: Seconds,
    #[serde(flatten)]
    pub record: Record,
}

impl From<TrackerDecision> for LogRecord {
    fn from(d: TrackerDecision) -> Self {
        LogRecord {
            time: d.time,
            record: Record::Tracker {
                isp: d.isp,
                action: d.action,
                peer: d.peer,
                target: d.target,
            },
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EventLog {
    pub level: LogLevel,
    pub records: Vec<LogRecord>,
}

impl EventLog {
    pub fn new(level: LogLevel) -> Self {
        EventLog {
            level,
            records: Vec::new(),
        }
    }

    pub fn full(&self) -> bool {
        self.level == LogLevel::Full
    }

    pub fn push(&mut self, time: Seconds, record: Record) {
        self.records.push(LogRecord { time, record });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl io::BufRead) -> crate::Result<Vec<LogRecord>> {
        let mut out = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| crate::Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            out.push(rec);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let mut log = EventLog::new(LogLevel::Summary);
        log.push(1.5, Record::Join { peer: PeerId(3), isp: IspId(1), seed: false });
        log.push(
            2.0,
            Record::Tracker {
                isp: IspId(1),
                action: TrackerAction::Grant,
                peer: PeerId(3),
                target: Some(PeerId(9)),
            },
        );
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"time\":1.5,\"kind\":\"join\""));
        let back = EventLog::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, log.records);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let input = b"{\"time\":0.0,\"kind\":\"bin_close\",\"bin\":0}\nnot json\n";
        match EventLog::read_jsonl(&input[..]) {
            Err(crate::Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
