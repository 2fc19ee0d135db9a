//! Experiment configurations and their builders.

mod distribution;
pub mod presets;

pub use distribution::{reference_file_text, synthetic_distribution, AsDistribution, AsRow, REFERENCE_AGGREGATES};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::{LogLevel, Topology};
use crate::peer::{Content, PeerConfig};
use crate::tracker::{Policy, TrackerConfig};
use crate::types::{BytesPerSec, IspId, PeerId, Seconds, KB};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

/// Leechers join uniformly within this window unless churn says otherwise.
pub const DEFAULT_START_WINDOW: Seconds = 60.0;

/// Default horizon as a multiple of the ideal completion time.
pub const DEFAULT_T_MAX_FACTOR: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerSpec {
    pub id: PeerId,
    pub isp: IspId,
    pub upload_capacity: BytesPerSec,
    pub start_time: Seconds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub isp: IspId,
    pub upload_capacity: BytesPerSec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementRule {
    /// The newcomer joins the ISP of the peer that completed.
    #[default]
    SameIsp,
    UniformIsp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnPlan {
    pub start_window: Seconds,
    pub replacement_pool: usize,
    #[serde(default)]
    pub rule: ReplacementRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisruptionKind {
    /// Crash every peer of `isp` holding a link to another ISP; optionally
    /// the initial seed as well.
    IsolateIsp { isp: IspId, include_initial_seed: bool },
    /// Remove the listed peers; crashed peers do not tell the tracker.
    Depart { peers: Vec<PeerId>, crash: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disruption {
    pub time: Seconds,
    #[serde(flatten)]
    pub kind: DisruptionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub rng_seed: u64,
    pub t_max: Seconds,
    pub content: Content,
    pub initial_seed: SeedSpec,
    pub tracker: TrackerConfig,
    pub peer_defaults: PeerConfig,
    pub topology: Topology,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub churn: Option<ChurnPlan>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub disruptions: Vec<Disruption>,
    #[serde(default)]
    pub log_level: LogLevel,
    pub peers: Vec<PeerSpec>,
}

impl ScenarioConfig {
    /// Id given to the initial seed: right after the leechers.
    pub fn initial_seed_id(&self) -> PeerId {
        PeerId(self.peers.len() as u32)
    }

    pub fn n_isps(&self) -> usize {
        self.topology.n_isps
    }

    pub fn mean_leecher_capacity(&self) -> Option<BytesPerSec> {
        if self.peers.is_empty() {
            return None;
        }
        Some(self.peers.iter().map(|p| p.upload_capacity).sum::<f64>() / self.peers.len() as f64)
    }

    pub fn ideal_completion(&self) -> Option<Seconds> {
        self.mean_leecher_capacity().map(|c| self.content.total_bytes() / c)
    }

    /// Sets `t_max` to `factor` times the ideal completion time.
    pub fn set_t_max_factor(&mut self, factor: f64) {
        let ideal = self
            .ideal_completion()
            .unwrap_or(self.content.total_bytes() / self.initial_seed.upload_capacity);
        self.t_max = factor * ideal;
    }

    pub fn population(&self, isp: IspId) -> usize {
        self.peers.iter().filter(|p| p.isp == isp).count()
    }

    pub fn with_k(mut self, k: Option<usize>) -> Self {
        match k {
            Some(k) => {
                self.tracker.policy = Policy::Locality;
                self.tracker.max_outgoing_per_isp = k;
            }
            None => self.tracker.policy = Policy::BittorrentRandom,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported schema_version {} (expected {SCENARIO_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.content.validate()?;
        self.tracker.validate()?;
        self.peer_defaults.validate()?;
        self.topology.validate()?;
        if !(self.t_max > 0.0) || !self.t_max.is_finite() {
            return Err(Error::config("t_max must be positive and finite"));
        }
        if self.rng_seed > i64::MAX as u64 {
            return Err(Error::config("rng_seed must fit in 63 bits"));
        }
        let n_isps = self.n_isps();
        if self.initial_seed.isp.index() >= n_isps {
            return Err(Error::UnknownIsp(self.initial_seed.isp));
        }
        if !(self.initial_seed.upload_capacity > 0.0) {
            return Err(Error::config("initial seed capacity must be positive"));
        }
        for (i, p) in self.peers.iter().enumerate() {
            if p.id.index() != i {
                return Err(Error::config(format!("peer ids must be dense: position {i} holds {}", p.id)));
            }
            if p.isp.index() >= n_isps {
                return Err(Error::UnknownIsp(p.isp));
            }
            if !(p.upload_capacity > 0.0) {
                return Err(Error::config(format!("{} has non-positive capacity", p.id)));
            }
            if !(p.start_time >= 0.0) {
                return Err(Error::config(format!("{} has negative start time", p.id)));
            }
        }
        if let Some(c) = &self.churn {
            if c.replacement_pool > self.peers.len() {
                return Err(Error::config("replacement_pool exceeds the population"));
            }
            if !(c.start_window >= 0.0) {
                return Err(Error::config("churn start_window must be >= 0"));
            }
        }
        for d in &self.disruptions {
            if !(d.time >= 0.0) {
                return Err(Error::config("disruption time must be >= 0"));
            }
            match &d.kind {
                DisruptionKind::IsolateIsp { isp, .. } if isp.index() >= n_isps => {
                    return Err(Error::UnknownIsp(*isp));
                }
                DisruptionKind::Depart { peers, .. } => {
                    if let Some(p) = peers.iter().find(|p| p.index() > self.peers.len()) {
                        return Err(Error::UnknownPeer(*p));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1));
            match line {
                Some(line) => Error::Parse {
                    line,
                    msg: e.message().to_string(),
                },
                None => Error::Toml(e.to_string()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn base_config(n_isps: usize, k_outgoing: Option<usize>, rng_seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: String::new(),
        rng_seed,
        t_max: 1.0,
        content: Content::default(),
        initial_seed: SeedSpec {
            isp: IspId(0),
            upload_capacity: 20.0 * KB,
        },
        tracker: TrackerConfig::default(),
        peer_defaults: PeerConfig::default(),
        topology: Topology::uncapped(n_isps),
        churn: None,
        disruptions: Vec::new(),
        log_level: LogLevel::Summary,
        peers: Vec::new(),
    }
    .with_k(k_outgoing)
}

/// Draws start times in `[0, window]` and the seed ISP, then sets `t_max`.
fn finish(mut cfg: ScenarioConfig, layout: Vec<(IspId, BytesPerSec)>, window: Seconds) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    cfg.initial_seed.isp = IspId(rng.gen_range(0..cfg.n_isps() as u32));
    cfg.peers = layout
        .into_iter()
        .enumerate()
        .map(|(i, (isp, cap))| PeerSpec {
            id: PeerId(i as u32),
            isp,
            upload_capacity: cap,
            start_time: if window > 0.0 { rng.gen_range(0.0..=window) } else { 0.0 },
        })
        .collect();
    cfg.set_t_max_factor(DEFAULT_T_MAX_FACTOR);
    cfg
}

/// Equal ISP populations with uniform capacities. `k_outgoing = None`
/// selects the plain random tracker.
pub fn build_homogeneous(
    n_peers: usize,
    n_isps: usize,
    seed_capacity: BytesPerSec,
    leecher_capacity: BytesPerSec,
    k_outgoing: Option<usize>,
    rng_seed: u64,
) -> Result<ScenarioConfig> {
    if n_isps == 0 || n_peers % n_isps != 0 {
        return Err(Error::Divisibility {
            n_peers,
            reason: format!("{n_isps} ISPs must divide the population"),
        });
    }
    let per = n_peers / n_isps;
    let mut cfg = base_config(n_isps, k_outgoing, rng_seed);
    cfg.initial_seed.upload_capacity = seed_capacity;
    let layout = (0..n_isps)
        .flat_map(|i| std::iter::repeat((IspId(i as u32), leecher_capacity)).take(per))
        .collect();
    Ok(finish(cfg, layout, DEFAULT_START_WINDOW))
}

/// Capacities split in thirds per ISP (20/50/100 kB/s); the seed uploads at
/// 100 kB/s.
pub fn build_heterogeneous(
    n_peers: usize,
    n_isps: usize,
    k_outgoing: Option<usize>,
    rng_seed: u64,
) -> Result<ScenarioConfig> {
    if n_isps == 0 || n_peers % n_isps != 0 || (n_peers / n_isps) % 3 != 0 {
        return Err(Error::Divisibility {
            n_peers,
            reason: format!("per-ISP population must be a multiple of 3 over {n_isps} ISPs"),
        });
    }
    let per = n_peers / n_isps;
    let mut cfg = base_config(n_isps, k_outgoing, rng_seed);
    cfg.initial_seed.upload_capacity = 100.0 * KB;
    let mut layout = Vec::with_capacity(n_peers);
    for i in 0..n_isps {
        for cap in [20.0, 50.0, 100.0] {
            layout.extend(std::iter::repeat((IspId(i as u32), cap * KB)).take(per / 3));
        }
    }
    Ok(finish(cfg, layout, DEFAULT_START_WINDOW))
}

/// One virtual ISP per AS row, homogeneous 20 kB/s peers.
pub fn build_from_distribution(
    dist: &AsDistribution,
    k_outgoing: Option<usize>,
    churn: Option<ChurnPlan>,
    rng_seed: u64,
) -> Result<ScenarioConfig> {
    if dist.rows.is_empty() {
        return Err(Error::config("empty AS distribution"));
    }
    let mut cfg = base_config(dist.rows.len(), k_outgoing, rng_seed);
    cfg.name = dist.torrent_id.clone();
    let layout = dist
        .rows
        .iter()
        .enumerate()
        .flat_map(|(i, r)| std::iter::repeat((IspId(i as u32), 20.0 * KB)).take(r.peer_count))
        .collect();
    // Files list ASes by size; ISP ids are shuffled so that id order (which
    // the round-robin cursor walks) carries no size information. The
    // permutation depends on the torrent only, so ids are stable across seeds.
    let perm_seed = dist
        .torrent_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let cfg = relabel_isps(finish(cfg, layout, DEFAULT_START_WINDOW), perm_seed);
    match churn {
        Some(plan) => apply_churn(cfg, plan),
        None => Ok(cfg),
    }
}

/// Redraws the first-set start times over the plan's window and attaches it.
pub fn apply_churn(mut base: ScenarioConfig, plan: ChurnPlan) -> Result<ScenarioConfig> {
    if plan.replacement_pool > base.peers.len() {
        return Err(Error::config(format!(
            "replacement_pool {} exceeds population {}",
            plan.replacement_pool,
            base.peers.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(base.rng_seed ^ 0x6368_7572_6e00);
    for p in &mut base.peers {
        p.start_time = if plan.start_window > 0.0 {
            rng.gen_range(0.0..=plan.start_window)
        } else {
            0.0
        };
    }
    let t_max = base.t_max + plan.start_window * 2.0;
    base.churn = Some(plan);
    base.t_max = t_max;
    Ok(base)
}

/// Bridges of `isp` and the initial seed crash at `time`.
pub fn isolate_isp(mut base: ScenarioConfig, isp: IspId, time: Seconds) -> ScenarioConfig {
    base.disruptions.push(Disruption {
        time,
        kind: DisruptionKind::IsolateIsp {
            isp,
            include_initial_seed: true,
        },
    });
    base
}

/// Shuffles the ISP labels; used by tests that check label invariance.
pub fn relabel_isps(mut cfg: ScenarioConfig, rng_seed: u64) -> ScenarioConfig {
    let mut perm: Vec<u32> = (0..cfg.n_isps() as u32).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    for p in &mut cfg.peers {
        p.isp = IspId(perm[p.isp.index()]);
    }
    cfg.initial_seed.isp = IspId(perm[cfg.initial_seed.isp.index()]);
    for c in &mut cfg.topology.link_caps {
        c.isp = IspId(perm[c.isp.index()]);
    }
    cfg
}
