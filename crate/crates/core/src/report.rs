//! Text artifacts of a single run: per-ISP and per-peer CSVs, partition
//! episodes, the event log as JSON lines and a one-row summary.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::{
    detect_partitions, isp_metrics, max_overhead, mean_overhead, percentile95, slowdown, PartitionEpisode,
    SlowdownReport,
};
use crate::netsim::RunResult;
use crate::scenario::ScenarioConfig;
use crate::types::Seconds;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Slowdowns are undefined when nobody completed; that is not an error here.
pub fn slowdown_report(r: &RunResult) -> Option<SlowdownReport> {
    slowdown(&r.ledger).ok()
}

pub fn isp_metrics_csv(r: &RunResult) -> String {
    let report = slowdown_report(r);
    let mut s = String::from("isp,n_peers,overhead,p95,mean_slowdown,min_slowdown,max_slowdown\n");
    for m in isp_metrics(&r.ledger, report.as_ref()) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.isp.0,
            m.n_peers,
            m.overhead,
            m.p95,
            opt(m.mean_slowdown),
            opt(m.min_slowdown),
            opt(m.max_slowdown)
        );
    }
    s
}

pub fn peers_csv(r: &RunResult) -> String {
    let report = slowdown_report(r);
    let mut s = String::from("peer,isp,capacity,start,completion,slowdown,initial_seed,replacement\n");
    for p in &r.ledger.peers {
        let sd = report
            .as_ref()
            .and_then(|rep| rep.per_peer.iter().find(|x| x.peer == p.peer))
            .map(|x| x.slowdown);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            p.peer.0,
            p.isp.0,
            p.capacity,
            p.start,
            opt(p.completion),
            opt(sd),
            p.initial_seed,
            p.replacement
        );
    }
    s
}

pub fn partitions(r: &RunResult) -> Vec<PartitionEpisode> {
    detect_partitions(&r.log.records, r.end_time)
}

pub fn partitions_csv(episodes: &[PartitionEpisode]) -> String {
    let mut s = String::from("isp,start,end,duration,affected,open\n");
    for e in episodes {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.isp.0,
            e.start,
            e.end,
            e.duration(),
            e.affected.len(),
            e.open
        );
    }
    s
}

pub fn events_jsonl(r: &RunResult) -> String {
    let mut s = String::new();
    for rec in &r.log.records {
        s.push_str(&serde_json::to_string(rec).expect("log records serialise"));
        s.push('\n');
    }
    s
}

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub end_time: Seconds,
    pub stalled: usize,
    pub mean_overhead: f64,
    pub max_overhead: f64,
    pub mean_p95: f64,
    pub mean_slowdown: Option<f64>,
    pub mean_completion: Option<Seconds>,
    pub pm_fires: u64,
    pub events: u64,
}

impl RunSummary {
    pub fn new(cfg: &ScenarioConfig, r: &RunResult) -> Self {
        let report = slowdown_report(r);
        let n = r.ledger.n_isps.max(1) as f64;
        RunSummary {
            scenario: cfg.name.clone(),
            seed: cfg.rng_seed,
            end_time: r.end_time,
            stalled: r.stalled_peers.len(),
            mean_overhead: mean_overhead(&r.ledger),
            max_overhead: max_overhead(&r.ledger),
            mean_p95: r.ledger.isps().map(|i| percentile95(&r.ledger, i)).sum::<f64>() / n,
            mean_slowdown: report.as_ref().map(|s| s.mean),
            mean_completion: report.as_ref().map(|s| s.mean_completion_time()),
            pm_fires: r.pm_fires,
            events: r.events,
        }
    }
}
