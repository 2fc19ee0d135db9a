//! Parameter sweeps over a named preset.
//!
//! ```toml
//! base = "homogeneous-1000x10-k4"
//! parameter = "k_outgoing"
//! values = [4, 8, 12]
//! repetitions = 3
//! ```

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::RunResult;
use crate::report::RunSummary;
use crate::scenario::presets::{Family, Recipe};
use crate::scenario::ScenarioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    KOutgoing,
    TorrentSize,
    PeersPerIsp,
    LinkCap,
    ChurnWindow,
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "k_outgoing" => SweepParameter::KOutgoing,
            "torrent_size" => SweepParameter::TorrentSize,
            "peers_per_isp" => SweepParameter::PeersPerIsp,
            "link_cap" => SweepParameter::LinkCap,
            "churn_window" => SweepParameter::ChurnWindow,
            _ => return Err(Error::config(format!("unknown sweep parameter `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Preset name the parameter is applied to.
    pub base: String,
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    #[serde(default = "one")]
    pub repetitions: usize,
    /// Repetition `i` runs with seed `base_seed + i`.
    #[serde(default = "one_u64")]
    pub base_seed: u64,
    #[serde(default)]
    pub t_max_factor: Option<f64>,
}

fn one() -> usize {
    1
}

fn one_u64() -> u64 {
    1
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as usize)
    } else {
        Err(Error::config(format!("{what} must be a whole number, got {v}")))
    }
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SweepSpec = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::config("sweep needs at least one value"));
        }
        if self.repetitions == 0 {
            return Err(Error::config("repetitions must be >= 1"));
        }
        Recipe::parse(&self.base)?;
        for &v in &self.values {
            self.scenario(v, self.base_seed)?.validate()?;
        }
        Ok(())
    }

    /// The base preset with the swept parameter set to `value`.
    pub fn scenario(&self, value: f64, seed: u64) -> Result<ScenarioConfig> {
        let mut r = Recipe::parse(&self.base)?;
        match self.parameter {
            SweepParameter::KOutgoing => r.k = Some(as_count(value, "k")?),
            SweepParameter::LinkCap => {
                if !(value > 0.0) {
                    return Err(Error::config("link cap must be positive"));
                }
                r.link_cap_kb = Some(value);
            }
            SweepParameter::ChurnWindow => {
                if !matches!(r.family, Family::Torrent { .. }) {
                    return Err(Error::config("churn_window sweeps need a torrent preset"));
                }
                r.churn_window = Some(value);
            }
            SweepParameter::TorrentSize | SweepParameter::PeersPerIsp => {
                let v = as_count(value, "size")?;
                match &mut r.family {
                    Family::Homogeneous { n_peers, n_isps } | Family::Heterogeneous { n_peers, n_isps } => {
                        if self.parameter == SweepParameter::TorrentSize {
                            *n_peers = v;
                        } else {
                            if v == 0 || *n_peers % v != 0 {
                                return Err(Error::Divisibility {
                                    n_peers: *n_peers,
                                    reason: format!("{v} peers per ISP"),
                                });
                            }
                            *n_isps = *n_peers / v;
                        }
                    }
                    _ => return Err(Error::config("size sweeps need a homogeneous or heterogeneous preset")),
                }
            }
        }
        let mut cfg = r.build(seed)?;
        cfg.name = format!("{}@{:?}={}", self.base, self.parameter, value);
        if let Some(f) = self.t_max_factor {
            cfg.set_t_max_factor(f);
        }
        Ok(cfg)
    }

    pub fn jobs(&self) -> Result<Vec<SweepJob>> {
        let mut out = Vec::with_capacity(self.values.len() * self.repetitions);
        for &value in &self.values {
            for rep in 0..self.repetitions {
                let seed = self.base_seed + rep as u64;
                out.push(SweepJob {
                    value,
                    seed,
                    config: self.scenario(value, seed)?,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct SweepJob {
    pub value: f64,
    pub seed: u64,
    pub config: ScenarioConfig,
}

#[derive(Debug)]
pub struct SweepRun {
    pub value: f64,
    pub seed: u64,
    pub outcome: std::result::Result<(RunSummary, RunResult), String>,
}

/// Runs every job on a pool of `jobs` threads; results keep job order.
pub fn run_jobs(jobs: Vec<SweepJob>, threads: usize) -> Result<Vec<SweepRun>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        jobs.into_par_iter()
            .map(|j| {
                log::info!("sweep run {} seed {}", j.config.name, j.seed);
                let outcome = crate::run(&j.config)
                    .map(|r| (RunSummary::new(&j.config, &r), r))
                    .map_err(|e| e.to_string());
                SweepRun {
                    value: j.value,
                    seed: j.seed,
                    outcome,
                }
            })
            .collect()
    }))
}

/// One aggregated line per swept value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub runs: usize,
    pub failures: usize,
    pub stalled_runs: usize,
    pub mean_overhead: f64,
    pub min_overhead: f64,
    pub max_overhead: f64,
    pub mean_p95: f64,
    pub mean_slowdown: Option<f64>,
    pub min_slowdown: Option<f64>,
    pub max_slowdown: Option<f64>,
}

/// Mean, min and max over repetitions of each run's mean per-ISP figures.
pub fn aggregate(runs: &[SweepRun]) -> Vec<SweepRow> {
    let mut values: Vec<f64> = runs.iter().map(|r| r.value).collect();
    values.dedup();
    let mut rows = Vec::new();
    for v in values {
        let group: Vec<&SweepRun> = runs.iter().filter(|r| r.value == v).collect();
        let ok: Vec<&RunSummary> = group.iter().filter_map(|r| r.outcome.as_ref().ok()).map(|o| &o.0).collect();
        let n = ok.len().max(1) as f64;
        let ovh: Vec<f64> = ok.iter().map(|s| s.mean_overhead).collect();
        let sd: Vec<f64> = ok.iter().filter_map(|s| s.mean_slowdown).collect();
        let fold = |xs: &[f64], f: fn(f64, f64) -> f64| xs.iter().copied().reduce(f);
        rows.push(SweepRow {
            value: v,
            runs: ok.len(),
            failures: group.len() - ok.len(),
            stalled_runs: ok.iter().filter(|s| s.stalled > 0).count(),
            mean_overhead: ovh.iter().sum::<f64>() / n,
            min_overhead: fold(&ovh, f64::min).unwrap_or(f64::NAN),
            max_overhead: fold(&ovh, f64::max).unwrap_or(f64::NAN),
            mean_p95: ok.iter().map(|s| s.mean_p95).sum::<f64>() / n,
            mean_slowdown: (!sd.is_empty()).then(|| sd.iter().sum::<f64>() / sd.len() as f64),
            min_slowdown: fold(&sd, f64::min),
            max_slowdown: fold(&sd, f64::max),
        });
    }
    rows
}

pub fn rows_csv(rows: &[SweepRow]) -> String {
    let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from(
        "value,runs,failures,stalled_runs,mean_overhead,min_overhead,max_overhead,mean_p95,mean_slowdown,min_slowdown,max_slowdown\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.value,
            r.runs,
            r.failures,
            r.stalled_runs,
            r.mean_overhead,
            r.min_overhead,
            r.max_overhead,
            r.mean_p95,
            o(r.mean_slowdown),
            o(r.min_slowdown),
            o(r.max_slowdown)
        );
    }
    s
}

/// Least-squares fit `y = a + b x`, returning `(a, b, r_squared)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((a, b, r2))
}

/// Pearson correlation; `None` when either side is constant.
pub fn correlation(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
