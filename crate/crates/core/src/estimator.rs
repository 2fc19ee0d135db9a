//! Inter-AS traffic estimation over torrent censuses.
//!
//! A torrent of `S_T` peers split over ASes of `S_A` peers with content size
//! `C` makes AS `A` upload `(1 - S_A/S_T) * S_A * C` across its border under
//! the random tracker. Locality estimates scale that by a savings curve
//! indexed by AS size.
//!
//! Census files hold one block per torrent:
//!
//! ```text
//! torrent_id,content_bytes
//! t1,104857600
//! as_id,peer_count
//! 3320,12
//! 7922,3
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{overhead, MetricsLedger};
use crate::scenario::AsRow;
use crate::types::{Bytes, IspId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorrentCensusRow {
    pub torrent_id: String,
    pub content_bytes: Bytes,
    pub ases: Vec<AsRow>,
}

impl TorrentCensusRow {
    pub fn torrent_size(&self) -> usize {
        self.ases.iter().map(|a| a.peer_count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Census {
    pub torrents: Vec<TorrentCensusRow>,
}

impl Census {
    pub fn parse(text: &str) -> Result<Self> {
        let mut torrents: Vec<TorrentCensusRow> = Vec::new();
        let mut expect_header_values = false;
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 2 {
                return Err(Error::parse(line_no, "expected two comma-separated columns"));
            }
            match (cols[0], cols[1]) {
                ("torrent_id", "content_bytes") => {
                    expect_header_values = true;
                    continue;
                }
                ("as_id", "peer_count") => continue,
                _ => {}
            }
            if expect_header_values {
                let content_bytes = cols[1]
                    .parse::<f64>()
                    .ok()
                    .filter(|c| *c > 0.0 && c.is_finite())
                    .ok_or_else(|| Error::parse(line_no, "content_bytes must be a positive number"))?;
                if cols[0].is_empty() {
                    return Err(Error::parse(line_no, "empty torrent_id"));
                }
                torrents.push(TorrentCensusRow {
                    torrent_id: cols[0].to_string(),
                    content_bytes,
                    ases: Vec::new(),
                });
                seen.clear();
                expect_header_values = false;
                continue;
            }
            let Some(current) = torrents.last_mut() else {
                return Err(Error::parse(line_no, "AS row before any torrent_id,content_bytes header"));
            };
            let as_id = cols[0]
                .parse::<u64>()
                .map_err(|e| Error::parse(line_no, format!("as_id: {e}")))?;
            let peer_count = cols[1]
                .parse::<usize>()
                .map_err(|e| Error::parse(line_no, format!("peer_count: {e}")))?;
            if peer_count == 0 {
                return Err(Error::parse(line_no, "peer_count must be >= 1"));
            }
            if !seen.insert(as_id) {
                return Err(Error::parse(line_no, format!("duplicate as_id {as_id} in torrent")));
            }
            current.ases.push(AsRow { as_id, peer_count });
        }
        if expect_header_values {
            return Err(Error::parse(text.lines().count(), "header without torrent values"));
        }
        Ok(Census { torrents })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.torrents {
            let _ = writeln!(s, "torrent_id,content_bytes");
            let _ = writeln!(s, "{},{}", t.torrent_id, t.content_bytes);
            let _ = writeln!(s, "as_id,peer_count");
            for a in &t.ases {
                let _ = writeln!(s, "{},{}", a.as_id, a.peer_count);
            }
        }
        s
    }
}

/// Outward upload of one AS under the random tracker.
pub fn bt_upload_traffic(s_a: usize, s_t: usize, content: Bytes) -> Result<Bytes> {
    if s_a == 0 || s_a > s_t {
        return Err(Error::Estimator(format!("need 1 <= S_A <= S_T, got S_A={s_a} S_T={s_t}")));
    }
    if !(content > 0.0) {
        return Err(Error::Estimator("content size must be positive".into()));
    }
    let (a, t) = (s_a as f64, s_t as f64);
    Ok((1.0 - a / t) * a * content)
}

pub fn locality_traffic(s_a: usize, s_t: usize, content: Bytes, curve: &SavingsCurve) -> Result<Bytes> {
    Ok(bt_upload_traffic(s_a, s_t, content)? * (1.0 - curve.eval(s_a as f64)))
}

/// One copy into every AS but the origin, summed over torrents.
pub fn ideal_traffic(census: &Census) -> Bytes {
    census.torrents.iter().map(ideal_torrent).sum()
}

fn ideal_torrent(t: &TorrentCensusRow) -> Bytes {
    t.ases.len().saturating_sub(1) as f64 * t.content_bytes
}

/// Savings fraction by AS size, piecewise linear through its anchors,
/// flat beyond the last one and pinned to 0 at one peer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsCurve {
    anchors: Vec<(f64, f64)>,
}

impl SavingsCurve {
    pub fn new(mut anchors: Vec<(f64, f64)>) -> Result<Self> {
        for &(x, y) in &anchors {
            if !(x >= 1.0) || !x.is_finite() {
                return Err(Error::Estimator(format!("curve anchor at {x} peers is out of range")));
            }
            if !(0.0..=1.0).contains(&y) {
                return Err(Error::Estimator(format!("savings {y} at {x} peers is outside [0, 1]")));
            }
        }
        anchors.sort_by(|a, b| a.0.total_cmp(&b.0));
        if anchors.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Estimator("duplicate curve anchor".into()));
        }
        if anchors.first().is_none_or(|a| a.0 > 1.0) {
            anchors.insert(0, (1.0, 0.0));
        } else {
            anchors[0].1 = 0.0;
        }
        Ok(SavingsCurve { anchors })
    }

    pub fn zero() -> Self {
        SavingsCurve {
            anchors: vec![(1.0, 0.0)],
        }
    }

    pub fn anchors(&self) -> &[(f64, f64)] {
        &self.anchors
    }

    pub fn eval(&self, peers: f64) -> f64 {
        let a = &self.anchors;
        if peers <= a[0].0 {
            return a[0].1;
        }
        let last = a[a.len() - 1];
        if peers >= last.0 {
            return last.1;
        }
        let i = a.partition_point(|p| p.0 <= peers);
        let (x0, y0) = a[i - 1];
        let (x1, y1) = a[i];
        y0 + (y1 - y0) * (peers - x0) / (x1 - x0)
    }

    pub fn is_monotone(&self) -> bool {
        self.anchors.windows(2).all(|w| w[1].1 >= w[0].1)
    }

    /// Pointwise `self >= other` on the union of both anchor sets.
    pub fn dominates(&self, other: &SavingsCurve) -> bool {
        self.anchors
            .iter()
            .chain(&other.anchors)
            .all(|&(x, _)| self.eval(x) >= other.eval(x) - 1e-12)
    }
}

/// Plain-locality and locality+PM+RR curves.
///
/// File form: `peers_per_as,locality,locality_pm_rr` then one row per anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub locality: SavingsCurve,
    pub locality_pm_rr: SavingsCurve,
}

impl CurveSet {
    pub fn parse(text: &str) -> Result<Self> {
        let mut plain = Vec::new();
        let mut pmrr = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() || line.starts_with("peers_per_as") {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let nums: Option<Vec<f64>> = cols.iter().map(|c| c.parse().ok()).collect();
            match nums.as_deref() {
                Some(&[x, a, b]) => {
                    plain.push((x, a));
                    pmrr.push((x, b));
                }
                _ => return Err(Error::parse(i + 1, "expected peers_per_as,locality,locality_pm_rr")),
            }
        }
        Ok(CurveSet {
            locality: SavingsCurve::new(plain)?,
            locality_pm_rr: SavingsCurve::new(pmrr)?,
        })
    }

    pub fn to_text(&self) -> String {
        let mut xs: Vec<f64> = self
            .locality
            .anchors
            .iter()
            .chain(&self.locality_pm_rr.anchors)
            .map(|a| a.0)
            .collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let mut s = String::from("peers_per_as,locality,locality_pm_rr\n");
        for x in xs {
            let _ = writeln!(s, "{x},{},{}", self.locality.eval(x), self.locality_pm_rr.eval(x));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyTotals {
    pub bittorrent: Bytes,
    pub locality: Bytes,
    pub locality_pm_rr: Bytes,
    pub ideal: Bytes,
}

impl PolicyTotals {
    fn add(&mut self, o: &PolicyTotals) {
        self.bittorrent += o.bittorrent;
        self.locality += o.locality;
        self.locality_pm_rr += o.locality_pm_rr;
        self.ideal += o.ideal;
    }

    /// `ideal <= locality_pm_rr <= locality <= bittorrent`, up to rounding.
    pub fn is_ordered(&self) -> bool {
        let eps = 1e-9 * self.bittorrent.abs().max(1.0);
        self.ideal <= self.locality_pm_rr + eps
            && self.locality_pm_rr <= self.locality + eps
            && self.locality <= self.bittorrent + eps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorrentTraffic {
    pub torrent_id: String,
    pub totals: PolicyTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsTraffic {
    pub as_id: u64,
    pub totals: PolicyTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub totals: PolicyTotals,
    /// Sorted by BitTorrent traffic, largest first.
    pub per_torrent: Vec<TorrentTraffic>,
    /// Sorted by BitTorrent traffic, largest first. No ideal share per AS.
    pub per_as: Vec<AsTraffic>,
}

pub fn torrent_traffic(t: &TorrentCensusRow, curves: &CurveSet) -> Result<PolicyTotals> {
    let s_t = t.torrent_size();
    let mut out = PolicyTotals {
        ideal: ideal_torrent(t),
        ..PolicyTotals::default()
    };
    for a in &t.ases {
        let bt = bt_upload_traffic(a.peer_count, s_t, t.content_bytes)?;
        out.bittorrent += bt;
        out.locality += bt * (1.0 - curves.locality.eval(a.peer_count as f64));
        out.locality_pm_rr += bt * (1.0 - curves.locality_pm_rr.eval(a.peer_count as f64));
    }
    Ok(out)
}

pub fn aggregate(census: &Census, curves: &CurveSet) -> Result<Report> {
    if !curves.locality_pm_rr.dominates(&curves.locality) {
        log::warn!("locality+PM+RR curve saves less than plain locality somewhere; totals may not be ordered");
    }
    let mut totals = PolicyTotals::default();
    let mut per_torrent = Vec::with_capacity(census.torrents.len());
    let mut per_as: BTreeMap<u64, PolicyTotals> = BTreeMap::new();
    for t in &census.torrents {
        let tt = torrent_traffic(t, curves)?;
        totals.add(&tt);
        let s_t = t.torrent_size();
        for a in &t.ases {
            let bt = bt_upload_traffic(a.peer_count, s_t, t.content_bytes)?;
            let e = per_as.entry(a.as_id).or_default();
            e.bittorrent += bt;
            e.locality += bt * (1.0 - curves.locality.eval(a.peer_count as f64));
            e.locality_pm_rr += bt * (1.0 - curves.locality_pm_rr.eval(a.peer_count as f64));
        }
        per_torrent.push(TorrentTraffic {
            torrent_id: t.torrent_id.clone(),
            totals: tt,
        });
    }
    per_torrent.sort_by(|a, b| {
        b.totals
            .bittorrent
            .total_cmp(&a.totals.bittorrent)
            .then_with(|| a.torrent_id.cmp(&b.torrent_id))
    });
    let mut per_as: Vec<AsTraffic> = per_as
        .into_iter()
        .map(|(as_id, totals)| AsTraffic { as_id, totals })
        .collect();
    per_as.sort_by(|a, b| {
        b.totals
            .bittorrent
            .total_cmp(&a.totals.bittorrent)
            .then(a.as_id.cmp(&b.as_id))
    });
    Ok(Report {
        totals,
        per_torrent,
        per_as,
    })
}

impl Report {
    /// `rank,torrent_id,bittorrent,locality,locality_pm_rr,ideal` with running sums.
    pub fn cumulative_csv(&self) -> String {
        let mut s = String::from("rank,torrent_id,bittorrent,locality,locality_pm_rr,ideal\n");
        let mut acc = PolicyTotals::default();
        for (i, t) in self.per_torrent.iter().enumerate() {
            acc.add(&t.totals);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                i + 1,
                t.torrent_id,
                acc.bittorrent,
                acc.locality,
                acc.locality_pm_rr,
                acc.ideal
            );
        }
        s
    }

    pub fn per_as_csv(&self) -> String {
        let mut s = String::from("rank,as_id,bittorrent,locality,locality_pm_rr\n");
        for (i, a) in self.per_as.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                i + 1,
                a.as_id,
                a.totals.bittorrent,
                a.totals.locality,
                a.totals.locality_pm_rr
            );
        }
        s
    }

    pub fn totals_csv(&self) -> String {
        let t = &self.totals;
        format!(
            "policy,bytes\nbittorrent,{}\nlocality,{}\nlocality_pm_rr,{}\nideal,{}\n",
            t.bittorrent, t.locality, t.locality_pm_rr, t.ideal
        )
    }

    /// Share of BitTorrent traffic carried by the `n` largest torrents.
    pub fn top_share(&self, n: usize) -> f64 {
        if self.totals.bittorrent <= 0.0 {
            return 0.0;
        }
        let top: Bytes = self.per_torrent.iter().take(n).map(|t| t.totals.bittorrent).sum();
        top / self.totals.bittorrent
    }
}

/// Per-AS overheads of one scenario under both policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub scenario: String,
    pub as_size: usize,
    pub overhead_bt: f64,
    pub overhead_locality: f64,
}

/// Savings per AS size, averaged over scenarios.
///
/// Within a scenario all ASes of one size are pooled first; sizes where the
/// BitTorrent overhead is zero are skipped.
pub fn calibrate_curve(samples: &[CalibrationSample]) -> Result<SavingsCurve> {
    let mut pooled: BTreeMap<(usize, &str), (f64, f64)> = BTreeMap::new();
    for s in samples {
        if s.as_size == 0 || !(s.overhead_bt >= 0.0) || !(s.overhead_locality >= 0.0) {
            return Err(Error::Estimator(format!("bad calibration sample {s:?}")));
        }
        let e = pooled.entry((s.as_size, s.scenario.as_str())).or_insert((0.0, 0.0));
        e.0 += s.overhead_bt;
        e.1 += s.overhead_locality;
    }
    let mut by_size: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for ((size, _), (bt, loc)) in pooled {
        if bt > 0.0 {
            by_size.entry(size).or_default().push((1.0 - loc / bt).clamp(0.0, 1.0));
        }
    }
    if by_size.is_empty() {
        log::warn!("no usable calibration buckets; returning a zero curve");
        return Ok(SavingsCurve::zero());
    }
    let anchors = by_size
        .into_iter()
        .filter(|(size, _)| *size > 1)
        .map(|(size, v)| (size as f64, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    SavingsCurve::new(anchors)
}

/// One sample per ISP from a pair of runs over the same population.
pub fn samples_from_runs(
    scenario: &str,
    population: &[usize],
    bt: &MetricsLedger,
    locality: &MetricsLedger,
) -> Vec<CalibrationSample> {
    bt.isps()
        .filter(|i| population.get(i.index()).is_some_and(|&n| n > 0))
        .map(|i| CalibrationSample {
            scenario: scenario.to_string(),
            as_size: population[i.index()],
            overhead_bt: overhead(bt, i),
            overhead_locality: overhead(locality, i),
        })
        .collect()
}

/// Buckets a set of sizes into log-spaced groups and averages savings per
/// group; useful when few ASes share an exact size.
pub fn calibrate_bucketed(samples: &[CalibrationSample], edges: &[usize]) -> Result<SavingsCurve> {
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Estimator("bucket edges must increase".into()));
    }
    let mut grouped: Vec<CalibrationSample> = Vec::with_capacity(samples.len());
    let mut rep: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for s in samples {
        let b = edges.partition_point(|&e| e <= s.as_size);
        let e = rep.entry(b).or_insert((0.0, 0));
        e.0 += s.as_size as f64;
        e.1 += 1;
        grouped.push(CalibrationSample {
            as_size: b + 1,
            ..s.clone()
        });
    }
    let mut pooled: BTreeMap<(usize, &str), (f64, f64)> = BTreeMap::new();
    for s in &grouped {
        let e = pooled.entry((s.as_size - 1, s.scenario.as_str())).or_insert((0.0, 0.0));
        e.0 += s.overhead_bt;
        e.1 += s.overhead_locality;
    }
    let mut by_bucket: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for ((b, _), (bt, loc)) in pooled {
        if bt > 0.0 {
            by_bucket.entry(b).or_default().push((1.0 - loc / bt).clamp(0.0, 1.0));
        }
    }
    let anchors: Vec<(f64, f64)> = by_bucket
        .into_iter()
        .map(|(b, v)| {
            let (sum, n) = rep[&b];
            (sum / n as f64, v.iter().sum::<f64>() / v.len() as f64)
        })
        .filter(|(x, _)| *x > 1.0)
        .collect();
    let mut dedup: Vec<(f64, f64)> = Vec::with_capacity(anchors.len());
    for a in anchors {
        if dedup.last().is_none_or(|l: &(f64, f64)| l.0 != a.0) {
            dedup.push(a);
        }
    }
    SavingsCurve::new(dedup)
}

/// Runs `<torrent>-bt`, `<torrent>-k<k>` and `<torrent>-k<k>-pm-rr` for each
/// base name and calibrates both curves from the per-AS overheads.
pub fn calibrate_from_presets(torrents: &[&str], k: usize, seeds: &[u64], threads: usize) -> Result<CurveSet> {
    let variants = ["bt".to_string(), format!("k{k}"), format!("k{k}-pm-rr")];
    let mut jobs = Vec::new();
    for t in torrents {
        for &seed in seeds {
            for v in &variants {
                let config = crate::scenario::presets::build(&format!("{t}-{v}"), seed)?;
                jobs.push(crate::sweep::SweepJob { value: 0.0, seed, config });
            }
        }
    }
    let pops: Vec<Vec<usize>> = jobs
        .iter()
        .map(|j| (0..j.config.n_isps()).map(|i| j.config.population(IspId(i as u32))).collect())
        .collect();
    let names: Vec<String> = jobs.iter().map(|j| j.config.name.clone()).collect();
    let runs = crate::sweep::run_jobs(jobs, threads)?;
    let mut plain = Vec::new();
    let mut pmrr = Vec::new();
    for (i, chunk) in runs.chunks(3).enumerate() {
        let ledger = |j: usize| {
            chunk[j]
                .outcome
                .as_ref()
                .map(|o| &o.1.ledger)
                .map_err(|e| Error::Estimator(format!("{}: {e}", names[3 * i + j])))
        };
        let scenario = format!("{}@{}", names[3 * i], chunk[0].seed);
        let pop = &pops[3 * i];
        plain.extend(samples_from_runs(&scenario, pop, ledger(0)?, ledger(1)?));
        pmrr.extend(samples_from_runs(&scenario, pop, ledger(0)?, ledger(2)?));
    }
    Ok(CurveSet {
        locality: calibrate_curve(&plain)?,
        locality_pm_rr: calibrate_curve(&pmrr)?,
    })
}

/// Heavy-tailed synthetic census: torrent sizes and AS spreads follow
/// power laws. Not derived from any crawl.
pub fn synthetic_census(n_torrents: usize, max_ases: usize, rng_seed: u64) -> Census {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let max_ases = max_ases.max(1);
    let mut torrents = Vec::with_capacity(n_torrents);
    for i in 0..n_torrents {
        let u: f64 = rng.gen_range(1e-3..1.0);
        let size = ((2.0 * u.powf(-1.2)).round() as usize).clamp(2, 20_000);
        let n_ases = rng.gen_range(1..=max_ases.min(size));
        // Zipf-like weights over AS ranks.
        let weights: Vec<f64> = (1..=n_ases).map(|r| (r as f64).powf(-1.1)).collect();
        let wsum: f64 = weights.iter().sum();
        let mut counts = vec![1usize; n_ases];
        for _ in n_ases..size {
            let mut x = rng.gen_range(0.0..wsum);
            let mut j = 0;
            while j + 1 < n_ases && x >= weights[j] {
                x -= weights[j];
                j += 1;
            }
            counts[j] += 1;
        }
        let mut ids: Vec<u64> = Vec::with_capacity(n_ases);
        while ids.len() < n_ases {
            let id = rng.gen_range(1..=400u64);
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        let content = [50.0, 100.0, 700.0, 4400.0][rng.gen_range(0..4)] * 1024.0 * 1024.0;
        torrents.push(TorrentCensusRow {
            torrent_id: format!("synthetic-{i}"),
            content_bytes: content,
            ases: ids
                .into_iter()
                .zip(counts)
                .map(|(as_id, peer_count)| AsRow { as_id, peer_count })
                .collect(),
        });
    }
    Census { torrents }
}
