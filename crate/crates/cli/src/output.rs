use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use swarmsim_core::report::{self, RunSummary};
use swarmsim_core::tracker::{Policy, SelectionStrategy};
use swarmsim_core::{IspId, RunResult, ScenarioConfig};

use crate::commands::CliError;

/// Event logs above this size are gzipped.
const GZIP_EVENTS_ABOVE: usize = 8 << 20;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub scenario: String,
    pub seed: u64,
    /// Hash of `scenario.toml`, which re-runs the exact configuration.
    pub config_sha256: String,
    pub policy: String,
    /// Leechers per ISP at start.
    pub population: Vec<usize>,
    pub summary: RunSummary,
    pub files: BTreeMap<String, String>,
}

pub fn policy_tag(cfg: &ScenarioConfig) -> &'static str {
    let t = &cfg.tracker;
    match (t.policy, t.pm_enabled, t.selection_strategy) {
        (Policy::BittorrentRandom, false, _) => "bt",
        (Policy::Locality, false, SelectionStrategy::RandomPeer) => "locality",
        (Policy::Locality, true, SelectionStrategy::RoundRobinIsp) => "locality_pm_rr",
        _ => "other",
    }
}

pub fn run_dir_name(cfg: &ScenarioConfig) -> String {
    let name: String = cfg
        .name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    let name = if name.is_empty() { "scenario".to_string() } else { name };
    format!("{name}-s{}", cfg.rng_seed)
}

fn write(dir: &Path, name: &str, bytes: &[u8], files: &mut BTreeMap<String, String>) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    files.insert(name.to_string(), sha256_hex(bytes));
    Ok(())
}

/// Writes every artifact of one run into `dir`.
pub fn write_run(dir: &Path, cfg: &ScenarioConfig, r: &RunResult) -> Result<Manifest, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = BTreeMap::new();
    let toml = cfg.to_toml()?;
    write(dir, "scenario.toml", toml.as_bytes(), &mut files)?;
    write(dir, "isp_metrics.csv", report::isp_metrics_csv(r).as_bytes(), &mut files)?;
    write(dir, "peers.csv", report::peers_csv(r).as_bytes(), &mut files)?;
    let episodes = report::partitions(r);
    write(dir, "partitions.csv", report::partitions_csv(&episodes).as_bytes(), &mut files)?;
    let events = report::events_jsonl(r);
    if events.len() > GZIP_EVENTS_ABOVE {
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(events.as_bytes()).expect("in-memory write");
        let bytes = gz.finish().expect("in-memory write");
        write(dir, "events.jsonl.gz", &bytes, &mut files)?;
    } else {
        write(dir, "events.jsonl", events.as_bytes(), &mut files)?;
    }
    let summary = RunSummary::new(cfg, r);
    write(
        dir,
        "summary.json",
        serde_json::to_string_pretty(&summary).expect("summary serialises").as_bytes(),
        &mut files,
    )?;
    let manifest = Manifest {
        tool: "swarmsim".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        scenario: cfg.name.clone(),
        seed: cfg.rng_seed,
        config_sha256: sha256_hex(toml.as_bytes()),
        policy: policy_tag(cfg).into(),
        population: (0..cfg.n_isps()).map(|i| cfg.population(IspId(i as u32))).collect(),
        summary,
        files,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serialises"))
        .map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}

/// `(isp, overhead)` pairs from an `isp_metrics.csv`.
pub fn read_overheads(path: &Path) -> Result<Vec<(usize, f64)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut cols = line.split(',');
        let isp = cols.next().and_then(|c| c.parse().ok());
        let ovh = cols.nth(1).and_then(|c| c.parse().ok());
        match (isp, ovh) {
            (Some(isp), Some(ovh)) => out.push((isp, ovh)),
            _ => {
                return Err(CliError::Usage(format!("{}:{}: malformed metrics row", path.display(), i + 1)));
            }
        }
    }
    Ok(out)
}

pub fn run_dirs(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| CliError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}
