//! Traffic ledger and the evaluation metrics computed from it.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::log::{LogRecord, Record};
use crate::types::{Bytes, BytesPerSec, IspId, PeerId, Seconds};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerRecord {
    pub peer: PeerId,
    pub isp: IspId,
    pub capacity: BytesPerSec,
    pub start: Seconds,
    pub completion: Option<Seconds>,
    pub initial_seed: bool,
    pub replacement: bool,
}

/// Bytes uploaded per (source ISP, destination ISP, 5-minute bin).
///
/// Inter-ISP bytes are kept as per-ISP outbound and inbound bin series plus
/// per-pair totals; intra-ISP bytes as per-ISP bin series.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsLedger {
    pub n_isps: usize,
    pub content_bytes: Bytes,
    outbound: Vec<Vec<Bytes>>,
    inbound: Vec<Vec<Bytes>>,
    local: Vec<Vec<Bytes>>,
    pair_totals: BTreeMap<(IspId, IspId), Bytes>,
    n_bins: usize,
    last_active_bin: Option<usize>,
    pub peers: Vec<PeerRecord>,
}

impl MetricsLedger {
    pub fn new(n_isps: usize, content_bytes: Bytes) -> Self {
        MetricsLedger {
            n_isps,
            content_bytes,
            outbound: vec![Vec::new(); n_isps],
            inbound: vec![Vec::new(); n_isps],
            local: vec![Vec::new(); n_isps],
            ..MetricsLedger::default()
        }
    }

    pub fn credit(&mut self, src: IspId, dst: IspId, bin: usize, bytes: Bytes) {
        debug_assert!(bytes >= 0.0);
        if bytes <= 0.0 {
            return;
        }
        self.ensure_bins(bin + 1);
        if src == dst {
            self.local[src.index()][bin] += bytes;
        } else {
            self.outbound[src.index()][bin] += bytes;
            self.inbound[dst.index()][bin] += bytes;
            *self.pair_totals.entry((src, dst)).or_insert(0.0) += bytes;
        }
        self.last_active_bin = Some(self.last_active_bin.map_or(bin, |b| b.max(bin)));
    }

    /// Makes sure the series cover `n` bins, even if silent.
    pub fn ensure_bins(&mut self, n: usize) {
        if n > self.n_bins {
            self.n_bins = n;
            for series in self
                .outbound
                .iter_mut()
                .chain(self.inbound.iter_mut())
                .chain(self.local.iter_mut())
            {
                series.resize(n, 0.0);
            }
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn last_active_bin(&self) -> Option<usize> {
        self.last_active_bin
    }

    pub fn outbound_series(&self, isp: IspId) -> &[Bytes] {
        &self.outbound[isp.index()]
    }

    pub fn inbound_series(&self, isp: IspId) -> &[Bytes] {
        &self.inbound[isp.index()]
    }

    pub fn outbound_total(&self, isp: IspId) -> Bytes {
        self.outbound[isp.index()].iter().sum()
    }

    pub fn inbound_total(&self, isp: IspId) -> Bytes {
        self.inbound[isp.index()].iter().sum()
    }

    pub fn local_total(&self, isp: IspId) -> Bytes {
        self.local[isp.index()].iter().sum()
    }

    pub fn pair_total(&self, src: IspId, dst: IspId) -> Bytes {
        if src == dst {
            return self.local_total(src);
        }
        self.pair_totals.get(&(src, dst)).copied().unwrap_or(0.0)
    }

    pub fn pair_totals(&self) -> &BTreeMap<(IspId, IspId), Bytes> {
        &self.pair_totals
    }

    pub fn total_bytes(&self) -> Bytes {
        let inter: Bytes = self.outbound.iter().flatten().sum();
        let local: Bytes = self.local.iter().flatten().sum();
        inter + local
    }

    pub fn isps(&self) -> impl Iterator<Item = IspId> {
        (0..self.n_isps as u32).map(IspId)
    }

    pub fn leechers(&self) -> impl Iterator<Item = &PeerRecord> {
        self.peers.iter().filter(|p| !p.initial_seed)
    }

    pub fn peers_in(&self, isp: IspId) -> usize {
        self.peers.iter().filter(|p| p.isp == isp && !p.initial_seed).count()
    }
}

/// Outbound inter-ISP bytes of `isp` in content copies.
pub fn overhead(ledger: &MetricsLedger, isp: IspId) -> f64 {
    ledger.outbound_total(isp) / ledger.content_bytes
}

/// Nearest-rank index used for the 95th percentile over `n` samples.
///
/// The rank is `floor(0.95 n) + 1`, capped at `n`: the smallest sample with
/// strictly more than 95% of the series at or below it.
pub fn p95_rank(n: usize) -> usize {
    ((95 * n) / 100 + 1).min(n)
}

/// 95th percentile of the 5-minute outbound bins of `isp`, in content copies.
///
/// Bins run from the start of the run to the last bin carrying any traffic.
pub fn percentile95(ledger: &MetricsLedger, isp: IspId) -> f64 {
    let Some(last) = ledger.last_active_bin() else {
        log::warn!("percentile95 on an empty ledger for {isp}");
        return 0.0;
    };
    let series = ledger.outbound_series(isp);
    let mut bins: Vec<Bytes> = (0..=last).map(|b| series.get(b).copied().unwrap_or(0.0)).collect();
    bins.sort_by(f64::total_cmp);
    bins[p95_rank(bins.len()) - 1] / ledger.content_bytes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerSlowdown {
    pub peer: PeerId,
    pub isp: IspId,
    pub completion_time: Seconds,
    pub slowdown: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IspSlowdown {
    pub isp: IspId,
    pub completed: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowdownReport {
    pub ideal_completion: Seconds,
    pub per_peer: Vec<PeerSlowdown>,
    pub per_isp: Vec<IspSlowdown>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Leechers that never completed.
    pub stalled: Vec<PeerId>,
}

impl SlowdownReport {
    pub fn for_isp(&self, isp: IspId) -> Option<&IspSlowdown> {
        self.per_isp.iter().find(|s| s.isp == isp)
    }

    pub fn mean_completion_time(&self) -> Seconds {
        self.mean * self.ideal_completion
    }
}

/// Content size over the mean upload capacity of the leechers.
pub fn ideal_completion(ledger: &MetricsLedger) -> Option<Seconds> {
    let caps: Vec<BytesPerSec> = ledger.leechers().map(|p| p.capacity).collect();
    if caps.is_empty() {
        return None;
    }
    let mean = caps.iter().sum::<f64>() / caps.len() as f64;
    Some(ledger.content_bytes / mean)
}

pub fn slowdown(ledger: &MetricsLedger) -> Result<SlowdownReport> {
    let ideal = ideal_completion(ledger).ok_or(Error::NoCompletions)?;
    let mut per_peer = Vec::new();
    let mut stalled = Vec::new();
    for p in ledger.leechers() {
        match p.completion {
            Some(c) => per_peer.push(PeerSlowdown {
                peer: p.peer,
                isp: p.isp,
                completion_time: c - p.start,
                slowdown: (c - p.start) / ideal,
            }),
            None => stalled.push(p.peer),
        }
    }
    if per_peer.is_empty() {
        return Err(Error::NoCompletions);
    }
    let mut per_isp_acc: BTreeMap<IspId, Vec<f64>> = BTreeMap::new();
    for s in &per_peer {
        per_isp_acc.entry(s.isp).or_default().push(s.slowdown);
    }
    let per_isp = per_isp_acc
        .into_iter()
        .map(|(isp, v)| {
            let (mean, min, max) = stats(&v);
            IspSlowdown {
                isp,
                completed: v.len(),
                mean,
                min,
                max,
            }
        })
        .collect();
    let all: Vec<f64> = per_peer.iter().map(|s| s.slowdown).collect();
    let (mean, min, max) = stats(&all);
    Ok(SlowdownReport {
        ideal_completion: ideal,
        per_peer,
        per_isp,
        mean,
        min,
        max,
        stalled,
    })
}

fn stats(v: &[f64]) -> (f64, f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionEpisode {
    pub isp: IspId,
    pub start: Seconds,
    pub end: Seconds,
    pub affected: Vec<PeerId>,
    /// Still ongoing when the log ended.
    pub open: bool,
}

impl PartitionEpisode {
    pub fn duration(&self) -> Seconds {
        self.end - self.start
    }
}

#[derive(Default)]
struct IspWatch {
    live: IndexMap<PeerId, (bool, usize)>,
    episode: Option<(Seconds, Vec<PeerId>)>,
}

impl IspWatch {
    fn partitioned(&self) -> bool {
        !self.live.is_empty()
            && self.live.values().all(|&(starved, _)| starved)
            && self.live.values().any(|&(_, pieces)| pieces > 0)
    }
}

/// Maximal intervals during which every live leecher of an ISP is starved.
///
/// Records sharing a timestamp are applied together before the predicate is
/// evaluated. ISPs whose leechers hold no piece at all yet (swarm start-up) are
/// not reported.
pub fn detect_partitions(records: &[LogRecord], end_time: Seconds) -> Vec<PartitionEpisode> {
    let mut watch: BTreeMap<IspId, IspWatch> = BTreeMap::new();
    let mut episodes = Vec::new();
    let mut i = 0;
    while i < records.len() {
        let t = records[i].time;
        let mut touched = Vec::new();
        while i < records.len() && records[i].time == t {
            match &records[i].record {
                Record::Join { peer, isp, seed: false } => {
                    watch.entry(*isp).or_default().live.insert(*peer, (false, 0));
                    touched.push(*isp);
                }
                Record::Complete { peer, isp } | Record::Depart { peer, isp, .. } => {
                    if let Some(w) = watch.get_mut(isp) {
                        w.live.shift_remove(peer);
                        touched.push(*isp);
                    }
                }
                Record::Starved { peer, isp, pieces } => {
                    if let Some(s) = watch.get_mut(isp).and_then(|w| w.live.get_mut(peer)) {
                        *s = (true, *pieces);
                        touched.push(*isp);
                    }
                }
                Record::Unstarved { peer, isp } => {
                    if let Some(s) = watch.get_mut(isp).and_then(|w| w.live.get_mut(peer)) {
                        s.0 = false;
                        touched.push(*isp);
                    }
                }
                _ => {}
            }
            i += 1;
        }
        touched.sort_unstable();
        touched.dedup();
        for isp in touched {
            let w = watch.get_mut(&isp).expect("touched ISP is watched");
            let now_partitioned = w.partitioned();
            match (&mut w.episode, now_partitioned) {
                (None, true) => {
                    w.episode = Some((t, w.live.keys().copied().collect()));
                }
                (Some((_, affected)), true) => {
                    for p in w.live.keys() {
                        if !affected.contains(p) {
                            affected.push(*p);
                        }
                    }
                }
                (Some(_), false) => {
                    let (start, affected) = w.episode.take().expect("open episode");
                    if t > start {
                        episodes.push(PartitionEpisode {
                            isp,
                            start,
                            end: t,
                            affected,
                            open: false,
                        });
                    }
                }
                (None, false) => {}
            }
        }
    }
    for (isp, w) in watch {
        if let Some((start, affected)) = w.episode {
            episodes.push(PartitionEpisode {
                isp,
                start,
                end: end_time.max(start),
                affected,
                open: true,
            });
        }
    }
    episodes.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.isp.cmp(&b.isp)));
    episodes
}

/// Per-ISP row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IspMetrics {
    pub isp: IspId,
    pub n_peers: usize,
    pub overhead: f64,
    pub p95: f64,
    pub mean_slowdown: Option<f64>,
    pub min_slowdown: Option<f64>,
    pub max_slowdown: Option<f64>,
}

pub fn isp_metrics(ledger: &MetricsLedger, report: Option<&SlowdownReport>) -> Vec<IspMetrics> {
    let mut counts = vec![0usize; ledger.n_isps];
    for p in ledger.leechers() {
        counts[p.isp.index()] += 1;
    }
    ledger
        .isps()
        .map(|isp| {
            let s = report.and_then(|r| r.for_isp(isp));
            IspMetrics {
                isp,
                n_peers: counts[isp.index()],
                overhead: overhead(ledger, isp),
                p95: percentile95(ledger, isp),
                mean_slowdown: s.map(|s| s.mean),
                min_slowdown: s.map(|s| s.min),
                max_slowdown: s.map(|s| s.max),
            }
        })
        .collect()
}

/// Mean of `overhead` over ISPs that uploaded anything or hold peers.
pub fn mean_overhead(ledger: &MetricsLedger) -> f64 {
    let isps: Vec<IspId> = ledger
        .isps()
        .filter(|&i| ledger.peers_in(i) > 0 || ledger.outbound_total(i) > 0.0)
        .collect();
    if isps.is_empty() {
        return 0.0;
    }
    isps.iter().map(|&i| overhead(ledger, i)).sum::<f64>() / isps.len() as f64
}

pub fn max_overhead(ledger: &MetricsLedger) -> f64 {
    ledger.isps().map(|i| overhead(ledger, i)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BIN_SECONDS;
    use proptest::prelude::*;

    fn ledger(n_isps: usize) -> MetricsLedger {
        MetricsLedger::new(n_isps, 1000.0)
    }

    #[test]
    fn one_copy_outside_is_overhead_one() {
        let mut l = ledger(2);
        l.credit(IspId(0), IspId(1), 0, 600.0);
        l.credit(IspId(0), IspId(1), 3, 400.0);
        l.credit(IspId(0), IspId(0), 1, 5000.0);
        assert_eq!(overhead(&l, IspId(0)), 1.0);
        assert_eq!(overhead(&l, IspId(1)), 0.0);
    }

    #[test]
    fn constant_rate_percentile() {
        let mut l = ledger(2);
        let r = 2.0;
        for b in 0..40 {
            l.credit(IspId(0), IspId(1), b, BIN_SECONDS * r);
        }
        assert!((percentile95(&l, IspId(0)) - BIN_SECONDS * r / 1000.0).abs() < 1e-12);
    }

    #[test]
    fn single_burst_among_twenty_bins() {
        let mut l = ledger(2);
        l.credit(IspId(0), IspId(1), 7, 5000.0);
        l.credit(IspId(1), IspId(1), 19, 1.0);
        assert_eq!(l.last_active_bin(), Some(19));
        assert_eq!(percentile95(&l, IspId(0)), 5.0);
    }

    #[test]
    fn empty_ledger_percentile_is_zero() {
        assert_eq!(percentile95(&ledger(1), IspId(0)), 0.0);
    }

    #[test]
    fn rank_arithmetic() {
        assert_eq!(p95_rank(1), 1);
        assert_eq!(p95_rank(20), 20);
        assert_eq!(p95_rank(19), 19);
        assert_eq!(p95_rank(100), 96);
    }

    fn peer(id: u32, isp: u32, cap: f64, start: f64, completion: Option<f64>) -> PeerRecord {
        PeerRecord {
            peer: PeerId(id),
            isp: IspId(isp),
            capacity: cap,
            start,
            completion,
            initial_seed: false,
            replacement: false,
        }
    }

    #[test]
    fn ideal_time_completion_is_slowdown_one() {
        let mut l = ledger(1);
        l.peers.push(peer(0, 0, 20.0, 10.0, Some(60.0)));
        let r = slowdown(&l).unwrap();
        assert_eq!(r.ideal_completion, 50.0);
        assert!((r.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn heterogeneous_ideal_uses_mean_capacity() {
        let mut l = MetricsLedger::new(1, 56.0 * 1000.0);
        for (i, c) in [20.0, 50.0, 100.0].iter().enumerate() {
            l.peers.push(peer(i as u32, 0, *c, 0.0, Some(1.0)));
        }
        let mut seed = peer(9, 0, 100.0, 0.0, None);
        seed.initial_seed = true;
        l.peers.push(seed);
        let ideal = ideal_completion(&l).unwrap();
        assert!((56.0 * 1000.0 / ideal - 170.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn no_completions_is_an_error() {
        let mut l = ledger(1);
        l.peers.push(peer(0, 0, 20.0, 0.0, None));
        assert!(matches!(slowdown(&l), Err(Error::NoCompletions)));
    }

    #[test]
    fn stalled_peers_are_reported_not_averaged() {
        let mut l = ledger(2);
        l.peers.push(peer(0, 0, 10.0, 0.0, Some(100.0)));
        l.peers.push(peer(1, 1, 10.0, 0.0, None));
        let r = slowdown(&l).unwrap();
        assert_eq!(r.stalled, vec![PeerId(1)]);
        assert_eq!(r.per_peer.len(), 1);
        assert_eq!(r.per_isp.len(), 1);
    }

    fn rec(time: f64, record: Record) -> LogRecord {
        LogRecord { time, record }
    }

    #[test]
    fn partition_until_end() {
        let isp = IspId(0);
        let log = vec![
            rec(0.0, Record::Join { peer: PeerId(1), isp, seed: false }),
            rec(0.0, Record::Join { peer: PeerId(2), isp, seed: false }),
            rec(100.0, Record::Starved { peer: PeerId(1), isp, pieces: 3 }),
            rec(120.0, Record::Starved { peer: PeerId(2), isp, pieces: 3 }),
        ];
        let eps = detect_partitions(&log, 500.0);
        assert_eq!(eps.len(), 1);
        assert_eq!((eps[0].start, eps[0].end, eps[0].open), (120.0, 500.0, true));
        assert_eq!(eps[0].affected.len(), 2);
    }

    #[test]
    fn partition_repaired() {
        let isp = IspId(3);
        let log = vec![
            rec(0.0, Record::Join { peer: PeerId(1), isp, seed: false }),
            rec(50.0, Record::Starved { peer: PeerId(1), isp, pieces: 1 }),
            rec(90.0, Record::Unstarved { peer: PeerId(1), isp }),
            rec(95.0, Record::Complete { peer: PeerId(1), isp }),
        ];
        let eps = detect_partitions(&log, 500.0);
        assert_eq!(eps.len(), 1);
        assert_eq!((eps[0].start, eps[0].end, eps[0].open), (50.0, 90.0, false));
    }

    #[test]
    fn startup_starvation_is_not_a_partition() {
        let isp = IspId(0);
        let log = vec![
            rec(0.0, Record::Join { peer: PeerId(1), isp, seed: false }),
            rec(0.0, Record::Starved { peer: PeerId(1), isp, pieces: 0 }),
            rec(40.0, Record::Unstarved { peer: PeerId(1), isp }),
        ];
        assert!(detect_partitions(&log, 100.0).is_empty());
    }

    #[test]
    fn one_unstarved_peer_prevents_partition() {
        let isp = IspId(0);
        let log = vec![
            rec(0.0, Record::Join { peer: PeerId(1), isp, seed: false }),
            rec(0.0, Record::Join { peer: PeerId(2), isp, seed: false }),
            rec(10.0, Record::Starved { peer: PeerId(1), isp, pieces: 4 }),
        ];
        assert!(detect_partitions(&log, 100.0).is_empty());
    }

    proptest! {
        #[test]
        fn inter_isp_bytes_balance(credits in proptest::collection::vec((0u32..4, 0u32..4, 0usize..10, 0.0f64..1e6), 0..100)) {
            let mut l = MetricsLedger::new(4, 1.0);
            for (s, d, b, x) in credits {
                l.credit(IspId(s), IspId(d), b, x);
            }
            let out: f64 = l.isps().map(|i| l.outbound_total(i)).sum();
            let inn: f64 = l.isps().map(|i| l.inbound_total(i)).sum();
            prop_assert!((out - inn).abs() <= 1e-9 * out.max(1.0));
            for i in l.isps() {
                let total = l.outbound_total(i) / l.content_bytes;
                prop_assert!(percentile95(&l, i) <= total + 1e-9);
            }
        }

        #[test]
        fn overhead_ignores_destination_labels(credits in proptest::collection::vec((1u32..4, 0usize..5, 0.0f64..1e6), 1..50)) {
            let mut a = MetricsLedger::new(4, 7.0);
            let mut b = MetricsLedger::new(4, 7.0);
            for (d, bin, x) in credits {
                a.credit(IspId(0), IspId(d), bin, x);
                b.credit(IspId(0), IspId(4 - d), bin, x);
            }
            prop_assert!((overhead(&a, IspId(0)) - overhead(&b, IspId(0))).abs() < 1e-9);
        }
    }
}
