//! Named scenarios.
//!
//! Grammar (dash separated, options in any order after the base):
//!
//! ```text
//! homogeneous-<N>x<I>-<policy>[-fastseed][-cap<C>][-pm][-rr]
//! heterogeneous-<N>x<I>-<policy>[-cap<C>][-pm][-rr]
//! torrent<1|2|3>-<policy>[-full][-pm][-rr]
//! churn<W>-torrent<1|2|3>-<policy>[-full][-pm][-rr]
//! partition-<pm|nopm>
//! policy = bt | k<K>
//! ```
//!
//! `cap<C>` caps every ISP's outbound inter-ISP rate at C kB/s. `torrent1`
//! defaults to the one-tenth scale distribution; `-full` selects 9844 peers.

use serde::{Deserialize, Serialize};

use super::{
    build_from_distribution, build_heterogeneous, build_homogeneous, AsDistribution, ChurnPlan,
    Disruption, DisruptionKind, ReplacementRule, ScenarioConfig,
};
use crate::error::{Error, Result};
use crate::netsim::Topology;
use crate::peer::Content;
use crate::tracker::SelectionStrategy;
use crate::types::{IspId, KB};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Homogeneous { n_peers: usize, n_isps: usize },
    Heterogeneous { n_peers: usize, n_isps: usize },
    Torrent { index: u8, full: bool },
    Partition,
}

/// Parsed form of a preset name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub family: Family,
    /// `None` is the plain random tracker.
    pub k: Option<usize>,
    pub fast_seed: bool,
    pub link_cap_kb: Option<f64>,
    pub pm: bool,
    pub rr: bool,
    pub churn_window: Option<f64>,
}

/// Representative names with a one-line description, for `presets` listings.
pub const CATALOGUE: &[(&str, &str)] = &[
    ("homogeneous-1000x10-bt", "base case, 20 kB/s seed, random tracker"),
    ("homogeneous-1000x10-k4", "base case with 4 outgoing inter-ISP connections"),
    ("homogeneous-1000x10-k4-fastseed", "base case with a 100 kB/s seed"),
    ("homogeneous-100x10-k4", "small torrent"),
    ("homogeneous-10000x2-k4", "two large ISPs"),
    ("homogeneous-1000x10-k4-cap40", "inter-ISP uplinks capped at 40 kB/s"),
    ("heterogeneous-990x10-k4", "thirds at 20/50/100 kB/s, 100 kB/s seed"),
    ("torrent1-k4-pm-rr", "torrent-1 AS shape at one tenth scale"),
    ("torrent1-k4-full", "torrent-1 AS shape, 9844 peers"),
    ("torrent2-k4", "torrent-2 AS shape"),
    ("torrent3-k4", "torrent-3 AS shape"),
    ("churn60-torrent1-k4", "torrent-1 with arrivals over 60 s and full replacement"),
    ("churn6000-torrent1-k4", "torrent-1 with arrivals over 6000 s and full replacement"),
    ("partition-nopm", "one ISP cut off mid-run, no repair"),
    ("partition-pm", "one ISP cut off mid-run, partition merging on"),
];

fn parse_dims(s: &str) -> Option<(usize, usize)> {
    let (n, i) = s.split_once('x')?;
    Some((n.parse().ok()?, i.parse().ok()?))
}

fn bad(name: &str) -> Error {
    Error::UnknownPreset(name.to_string())
}

impl Recipe {
    pub fn parse(name: &str) -> Result<Self> {
        let parts: Vec<&str> = name.split('-').collect();
        let mut rest = &parts[..];
        let mut churn_window = None;
        if let Some(w) = rest.first().and_then(|p| p.strip_prefix("churn")) {
            churn_window = Some(w.parse::<f64>().map_err(|_| bad(name))?);
            rest = &rest[1..];
        }
        let (head, tail) = rest.split_first().ok_or_else(|| bad(name))?;
        let (family, tail) = match *head {
            "homogeneous" | "heterogeneous" => {
                let (dims, tail) = tail.split_first().ok_or_else(|| bad(name))?;
                let (n_peers, n_isps) = parse_dims(dims).ok_or_else(|| bad(name))?;
                let f = if *head == "homogeneous" {
                    Family::Homogeneous { n_peers, n_isps }
                } else {
                    Family::Heterogeneous { n_peers, n_isps }
                };
                (f, tail)
            }
            "partition" => {
                if churn_window.is_some() {
                    return Err(bad(name));
                }
                let pm = match tail {
                    ["pm"] => true,
                    ["nopm"] => false,
                    _ => return Err(bad(name)),
                };
                return Ok(Recipe {
                    family: Family::Partition,
                    k: Some(PARTITION_K),
                    fast_seed: true,
                    link_cap_kb: None,
                    pm,
                    rr: false,
                    churn_window: None,
                });
            }
            t => {
                let index = t
                    .strip_prefix("torrent")
                    .and_then(|i| i.parse::<u8>().ok())
                    .filter(|i| (1..=3).contains(i))
                    .ok_or_else(|| bad(name))?;
                (Family::Torrent { index, full: false }, tail)
            }
        };
        if churn_window.is_some() && !matches!(family, Family::Torrent { .. }) {
            return Err(bad(name));
        }
        let (policy, opts) = tail.split_first().ok_or_else(|| bad(name))?;
        let k = match *policy {
            "bt" => None,
            p => Some(
                p.strip_prefix('k')
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| bad(name))?,
            ),
        };
        let mut r = Recipe {
            family,
            k,
            fast_seed: false,
            link_cap_kb: None,
            pm: false,
            rr: false,
            churn_window,
        };
        for o in opts {
            match *o {
                "fastseed" if matches!(r.family, Family::Homogeneous { .. }) => r.fast_seed = true,
                "pm" => r.pm = true,
                "rr" => r.rr = true,
                "full" => match &mut r.family {
                    Family::Torrent { full, .. } => *full = true,
                    _ => return Err(bad(name)),
                },
                c if c.starts_with("cap") => {
                    let v = c[3..].parse::<f64>().map_err(|_| bad(name))?;
                    if !(v > 0.0) {
                        return Err(bad(name));
                    }
                    r.link_cap_kb = Some(v);
                }
                _ => return Err(bad(name)),
            }
        }
        Ok(r)
    }

    pub fn build(&self, rng_seed: u64) -> Result<ScenarioConfig> {
        let mut cfg = match &self.family {
            Family::Homogeneous { n_peers, n_isps } => {
                let seed_cap = if self.fast_seed { 100.0 } else { 20.0 };
                build_homogeneous(*n_peers, *n_isps, seed_cap * KB, 20.0 * KB, self.k, rng_seed)?
            }
            Family::Heterogeneous { n_peers, n_isps } => build_heterogeneous(*n_peers, *n_isps, self.k, rng_seed)?,
            Family::Torrent { index, full } => {
                let file = match (index, full) {
                    (1, false) => "torrent1-tenth",
                    (1, true) => "torrent1",
                    (2, _) => "torrent2",
                    _ => "torrent3",
                };
                let dist = AsDistribution::reference(file)?;
                let churn = self.churn_window.map(|w| ChurnPlan {
                    start_window: w,
                    replacement_pool: dist.total_peers(),
                    rule: ReplacementRule::SameIsp,
                });
                build_from_distribution(&dist, self.k, churn, rng_seed)?
            }
            Family::Partition => partition_scenario(self.pm, rng_seed)?,
        };
        if let Some(c) = self.link_cap_kb {
            cfg.topology = Topology::with_uniform_cap(cfg.n_isps(), c * KB);
        }
        if self.rr {
            cfg.tracker.selection_strategy = SelectionStrategy::RoundRobinIsp;
        }
        cfg.tracker.pm_enabled |= self.pm;
        Ok(cfg)
    }
}

/// Builds a named preset.
pub fn build(name: &str, rng_seed: u64) -> Result<ScenarioConfig> {
    let mut cfg = Recipe::parse(name)?.build(rng_seed)?;
    cfg.name = name.to_string();
    Ok(cfg)
}

pub const PARTITION_K: usize = 2;
pub const PARTITION_ISP: IspId = IspId(0);
pub const PARTITION_TIME: f64 = 600.0;
pub const PARTITION_T_MAX: f64 = 3500.0;

/// Five ISPs of 40 and a 1 MB/s seed outside ISP 0. At `PARTITION_TIME`
/// every ISP-0 peer holding an outside link crashes together with the seed,
/// which by then has replicated the content across the other ISPs.
fn partition_scenario(pm: bool, rng_seed: u64) -> Result<ScenarioConfig> {
    let mut cfg = build_homogeneous(200, 5, 1000.0 * KB, 20.0 * KB, Some(PARTITION_K), rng_seed)?;
    cfg.content = Content {
        piece_count: 80,
        piece_size: 256.0 * KB,
    };
    if cfg.initial_seed.isp == PARTITION_ISP {
        cfg.initial_seed.isp = IspId(1);
    }
    cfg.peer_defaults.seed_linger = 1.0e6;
    cfg.tracker.pm_enabled = pm;
    cfg.tracker.t1_grant_period = 60.0;
    cfg.peer_defaults.t0_pm_base = 60.0;
    cfg.disruptions.push(Disruption {
        time: PARTITION_TIME,
        kind: DisruptionKind::IsolateIsp {
            isp: PARTITION_ISP,
            include_initial_seed: true,
        },
    });
    cfg.t_max = PARTITION_T_MAX;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracker::Policy;

    #[test]
    fn catalogue_entries_build() {
        for (name, _) in CATALOGUE {
            let c = build(name, 1).unwrap_or_else(|e| panic!("{name}: {e}"));
            c.validate().unwrap();
        }
    }

    #[test]
    fn parse_options() {
        let r = Recipe::parse("homogeneous-1000x10-k8-fastseed-cap40-pm-rr").unwrap();
        assert_eq!(r.family, Family::Homogeneous { n_peers: 1000, n_isps: 10 });
        assert_eq!(r.k, Some(8));
        assert!(r.fast_seed && r.pm && r.rr);
        assert_eq!(r.link_cap_kb, Some(40.0));
        let c = r.build(0).unwrap();
        assert_eq!(c.tracker.policy, Policy::Locality);
        assert_eq!(c.topology.link_caps.len(), 10);
        assert_eq!(c.initial_seed.upload_capacity, 100.0 * KB);
    }

    #[test]
    fn bad_names() {
        for n in [
            "homogeneous-1000x10",
            "homogeneous-1000-k4",
            "torrent4-k4",
            "churn60-homogeneous-100x10-k4",
            "heterogeneous-990x10-k4-fastseed",
            "homogeneous-100x10-k4-cap0",
            "partition-maybe",
            "nothing",
        ] {
            assert!(matches!(Recipe::parse(n), Err(Error::UnknownPreset(_))), "{n}");
        }
    }

    #[test]
    fn torrent_scales() {
        assert_eq!(build("torrent1-k4", 0).unwrap().peers.len(), 984);
        assert_eq!(build("torrent1-bt-full", 0).unwrap().peers.len(), 9844);
        let c = build("churn6000-torrent1-k4", 0).unwrap();
        assert_eq!(c.churn.as_ref().unwrap().replacement_pool, 984);
        assert!(c.peers.iter().all(|p| p.start_time <= 6000.0));
    }

    #[test]
    fn partition_seed_outside_target() {
        for s in 0..20 {
            let c = build("partition-pm", s).unwrap();
            assert_ne!(c.initial_seed.isp, PARTITION_ISP);
            assert!(c.tracker.pm_enabled);
        }
        assert!(!build("partition-nopm", 0).unwrap().tracker.pm_enabled);
    }
}
