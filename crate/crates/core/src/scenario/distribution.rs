//! AS population files.
//!
//! ```text
//! torrent_id,total_peers
//! torrent1,9844
//! as_id,peer_count
//! 64512,386
//! ...
//! ```
//!
//! Both column-name lines are optional; `#` starts a comment.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsRow {
    pub as_id: u64,
    pub peer_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsDistribution {
    pub torrent_id: String,
    pub rows: Vec<AsRow>,
}

const TORRENT1: &str = include_str!("../../data/torrent1.csv");
const TORRENT2: &str = include_str!("../../data/torrent2.csv");
const TORRENT3: &str = include_str!("../../data/torrent3.csv");
const TORRENT1_TENTH: &str = include_str!("../../data/torrent1-tenth.csv");

/// (name, total peers, AS count, largest AS) of the bundled distributions.
pub const REFERENCE_AGGREGATES: [(&str, usize, usize, usize); 4] = [
    ("torrent1", 9844, 1043, 386),
    ("torrent2", 4819, 211, 2415),
    ("torrent3", 996, 354, 31),
    ("torrent1-tenth", 984, 104, 39),
];

impl AsDistribution {
    pub fn total_peers(&self) -> usize {
        self.rows.iter().map(|r| r.peer_count).sum()
    }

    pub fn n_ases(&self) -> usize {
        self.rows.len()
    }

    pub fn max_as(&self) -> usize {
        self.rows.iter().map(|r| r.peer_count).max().unwrap_or(0)
    }

    /// Bundled synthetic distribution by name.
    pub fn reference(name: &str) -> Result<Self> {
        let text = match name {
            "torrent1" => TORRENT1,
            "torrent2" => TORRENT2,
            "torrent3" => TORRENT3,
            "torrent1-tenth" => TORRENT1_TENTH,
            _ => return Err(Error::UnknownPreset(name.to_string())),
        };
        Self::parse(text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut torrent: Option<(String, usize)> = None;
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            let (a, b) = match (cols.next(), cols.next(), cols.next()) {
                (Some(a), Some(b), None) => (a, b),
                _ => return Err(Error::parse(line_no, "expected two comma-separated columns")),
            };
            if (a, b) == ("torrent_id", "total_peers") || (a, b) == ("as_id", "peer_count") {
                continue;
            }
            if torrent.is_none() {
                let total = b
                    .parse::<usize>()
                    .map_err(|e| Error::parse(line_no, format!("total_peers: {e}")))?;
                if a.is_empty() {
                    return Err(Error::parse(line_no, "empty torrent_id"));
                }
                torrent = Some((a.to_string(), total));
                continue;
            }
            let as_id = a
                .parse::<u64>()
                .map_err(|e| Error::parse(line_no, format!("as_id: {e}")))?;
            let peer_count = b
                .parse::<usize>()
                .map_err(|e| Error::parse(line_no, format!("peer_count: {e}")))?;
            if peer_count == 0 {
                return Err(Error::parse(line_no, "peer_count must be >= 1"));
            }
            if !seen.insert(as_id) {
                return Err(Error::parse(line_no, format!("duplicate as_id {as_id}")));
            }
            rows.push(AsRow { as_id, peer_count });
        }
        let Some((torrent_id, total)) = torrent else {
            return Err(Error::parse(1, "missing torrent_id,total_peers line"));
        };
        let dist = AsDistribution { torrent_id, rows };
        if dist.rows.is_empty() {
            return Err(Error::config("AS distribution has no rows"));
        }
        if dist.total_peers() != total {
            return Err(Error::config(format!(
                "total_peers says {total} but rows sum to {}",
                dist.total_peers()
            )));
        }
        Ok(dist)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "torrent_id,total_peers");
        let _ = writeln!(s, "{},{}", self.torrent_id, self.total_peers());
        let _ = writeln!(s, "as_id,peer_count");
        for r in &self.rows {
            let _ = writeln!(s, "{},{}", r.as_id, r.peer_count);
        }
        s
    }
}

fn fill(max: usize, n_ases: usize, alpha: f64) -> Vec<usize> {
    (0..n_ases)
        .map(|i| {
            if i == 0 {
                max
            } else {
                ((max as f64) * ((i + 1) as f64).powf(-alpha)).floor().max(1.0) as usize
            }
        })
        .collect()
}

/// Heavy-tailed AS sizes `c_i ~ max * i^-alpha` adjusted to hit the exact
/// aggregates. AS ids come from the private range starting at 64512.
pub fn synthetic_distribution(
    torrent_id: &str,
    total_peers: usize,
    n_ases: usize,
    max_as: usize,
) -> Result<AsDistribution> {
    if n_ases == 0 || max_as == 0 {
        return Err(Error::config("need at least one AS of size >= 1"));
    }
    let lo = max_as + (n_ases - 1);
    let hi = max_as * n_ases;
    if total_peers < lo || total_peers > hi {
        return Err(Error::config(format!(
            "{total_peers} peers cannot fill {n_ases} ASes with the largest at {max_as}"
        )));
    }
    let sum = |a: f64| fill(max_as, n_ases, a).iter().sum::<usize>();
    let (mut a_lo, mut a_hi) = (0.0_f64, 64.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (a_lo + a_hi);
        if sum(mid) >= total_peers {
            a_lo = mid;
        } else {
            a_hi = mid;
        }
    }
    let mut counts = fill(max_as, n_ases, a_lo);
    let mut excess = counts.iter().sum::<usize>() - total_peers;
    // Trim from the tail end of each plateau so the order is preserved.
    while excess > 0 {
        let i = (1..n_ases)
            .rev()
            .find(|&i| counts[i] > 1 && (i + 1 == n_ases || counts[i] > counts[i + 1]))
            .expect("feasible aggregates leave room to trim");
        counts[i] -= 1;
        excess -= 1;
    }
    Ok(AsDistribution {
        torrent_id: torrent_id.to_string(),
        rows: counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| AsRow {
                as_id: 64512 + i as u64,
                peer_count: c,
            })
            .collect(),
    })
}

/// Text of a bundled file, with its synthetic-origin banner.
pub fn reference_file_text(name: &str, total: usize, n_ases: usize, max_as: usize) -> Result<String> {
    let d = synthetic_distribution(name, total, n_ases, max_as)?;
    Ok(format!(
        "# SYNTHETIC: power-law fill matching {total} peers, {n_ases} ASes, largest AS {max_as}.\n\
         # Not crawl data.\n{}",
        d.to_text()
    ))
}
