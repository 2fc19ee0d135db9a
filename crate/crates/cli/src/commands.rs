use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use swarmsim_core::estimator::{
    aggregate, calibrate_curve, calibrate_from_presets, synthetic_census, CalibrationSample, Census, CurveSet,
};
use swarmsim_core::netsim::LogLevel;
use swarmsim_core::scenario::presets::{self, CATALOGUE};
use swarmsim_core::scenario::AsDistribution;
use swarmsim_core::sweep::{self, SweepSpec};
use swarmsim_core::ScenarioConfig;

use crate::output::{self, Manifest};
use crate::{Command, EventDetail, Target};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] swarmsim_core::Error),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for run and sweep failures, 2 for bad input.
    pub fn code(&self) -> u8 {
        match self {
            CliError::Run(_) => 1,
            _ => 2,
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn with_path<T>(path: &Path, r: swarmsim_core::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_target(target: &Target, seed: Option<u64>) -> Result<ScenarioConfig, CliError> {
    match (&target.preset, &target.scenario) {
        (Some(name), None) => Ok(presets::build(name, seed.unwrap_or(1))?),
        (None, Some(path)) => {
            let mut cfg = with_path(path, ScenarioConfig::from_toml(&read(path)?))?;
            if let Some(s) = seed {
                cfg.rng_seed = s;
            }
            if cfg.name.is_empty() {
                cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            }
            Ok(cfg)
        }
        _ => Err(CliError::Usage("give either --preset NAME or a scenario file".into())),
    }
}

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run {
            target,
            seed,
            out,
            t_max_factor,
            events,
        } => {
            let mut cfg = load_target(&target, seed)?;
            if let Some(f) = t_max_factor {
                check_factor(f)?;
                cfg.set_t_max_factor(f);
            }
            match events {
                Some(EventDetail::Full) => cfg.log_level = LogLevel::Full,
                Some(EventDetail::Summary) => cfg.log_level = LogLevel::Summary,
                None => {}
            }
            cfg.validate()?;
            let r = swarmsim_core::run(&cfg).map_err(|e| CliError::Run(e.to_string()))?;
            let dir = out.join(output::run_dir_name(&cfg));
            let m = output::write_run(&dir, &cfg, &r)?;
            print_summary(&m);
            println!("wrote {}", dir.display());
            Ok(())
        }
        Command::Sweep {
            spec,
            preset,
            seed,
            out,
            jobs,
            t_max_factor,
        } => run_sweep(&spec, preset, seed, &out, jobs, t_max_factor),
        Command::Estimate {
            census,
            curves,
            calibrate_from,
            out,
        } => estimate(&census, curves.as_deref(), calibrate_from.as_deref(), &out),
        Command::Calibrate {
            torrents,
            k,
            seed,
            jobs,
            out,
        } => {
            let names: Vec<&str> = torrents.iter().map(String::as_str).collect();
            for n in &names {
                presets::build(&format!("{n}-bt"), 1)?;
            }
            let cs = calibrate_from_presets(&names, k, &seed, jobs).map_err(|e| CliError::Run(e.to_string()))?;
            fs::write(&out, cs.to_text()).map_err(|e| CliError::io(&out, e))?;
            println!("curve(5): locality {:.3}, locality+PM+RR {:.3}", cs.locality.eval(5.0), cs.locality_pm_rr.eval(5.0));
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Validate { file } => validate(&file),
        Command::Presets => {
            let mut stdout = std::io::stdout().lock();
            for (name, what) in CATALOGUE {
                if writeln!(stdout, "{name:<36} {what}").is_err() {
                    break;
                }
            }
            Ok(())
        }
        Command::ExportScenario {
            preset,
            seed,
            t_max_factor,
        } => {
            let mut cfg = presets::build(&preset, seed)?;
            if let Some(f) = t_max_factor {
                check_factor(f)?;
                cfg.set_t_max_factor(f);
            }
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::GenCensus {
            torrents,
            max_ases,
            seed,
            out,
        } => {
            let text = format!(
                "# SYNTHETIC census: {torrents} torrents, seed {seed}. Not crawl data.\n{}",
                synthetic_census(torrents, max_ases, seed).to_text()
            );
            match out {
                Some(p) => fs::write(&p, text).map_err(|e| CliError::io(&p, e))?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

fn check_factor(f: f64) -> Result<(), CliError> {
    if f > 0.0 && f.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--t-max-factor must be positive, got {f}")))
    }
}

fn print_summary(m: &Manifest) {
    let s = &m.summary;
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    println!(
        "{} seed {}: end {:.0} s, stalled {}, mean overhead {:.3}, max overhead {:.3}, mean slowdown {}",
        m.scenario,
        m.seed,
        s.end_time,
        s.stalled,
        s.mean_overhead,
        s.max_overhead,
        opt(s.mean_slowdown)
    );
}

fn run_sweep(
    path: &Path,
    preset: Option<String>,
    seed: Option<u64>,
    out: &Path,
    jobs: usize,
    t_max_factor: Option<f64>,
) -> Result<(), CliError> {
    let mut spec = with_path(path, SweepSpec::from_toml(&read(path)?))?;
    if let Some(p) = preset {
        spec.base = p;
    }
    if let Some(s) = seed {
        spec.base_seed = s;
    }
    if let Some(f) = t_max_factor {
        check_factor(f)?;
        spec.t_max_factor = Some(f);
    }
    spec.validate()?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "sweep".into());
    let dir = out.join(stem);
    let job_list = spec.jobs()?;
    let configs: Vec<ScenarioConfig> = job_list.iter().map(|j| j.config.clone()).collect();
    let runs = sweep::run_jobs(job_list, jobs)?;
    let mut failures = Vec::new();
    for (cfg, r) in configs.iter().zip(&runs) {
        match &r.outcome {
            Ok((_, result)) => {
                let name = format!("v{}-{}", r.value, output::run_dir_name(cfg));
                output::write_run(&dir.join("runs").join(name), cfg, result)?;
            }
            Err(e) => failures.push(format!("{},{},{}", r.value, r.seed, e.replace(',', ";"))),
        }
    }
    let rows = sweep::aggregate(&runs);
    let csv_path = dir.join("sweep.csv");
    fs::write(&csv_path, sweep::rows_csv(&rows)).map_err(|e| CliError::io(&csv_path, e))?;
    let spec_path = dir.join("spec.toml");
    let spec_text = spec.to_toml()?;
    fs::write(&spec_path, spec_text).map_err(|e| CliError::io(&spec_path, e))?;
    print!("{}", sweep::rows_csv(&rows));
    println!("wrote {}", csv_path.display());
    if failures.is_empty() {
        Ok(())
    } else {
        let fp = dir.join("failures.csv");
        fs::write(&fp, format!("value,seed,error\n{}\n", failures.join("\n"))).map_err(|e| CliError::io(&fp, e))?;
        Err(CliError::Run(format!("{} of {} runs failed, see {}", failures.len(), runs.len(), fp.display())))
    }
}

/// Pairs each locality run with the BitTorrent run over the same population.
fn curves_from_runs(root: &Path) -> Result<CurveSet, CliError> {
    let mut groups: BTreeMap<(Vec<usize>, u64), BTreeMap<String, Vec<(usize, f64)>>> = BTreeMap::new();
    for dir in output::run_dirs(root)? {
        let mpath = dir.join("manifest.json");
        let m: Manifest = serde_json::from_str(&read(&mpath)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", mpath.display())))?;
        let ovh = output::read_overheads(&dir.join("isp_metrics.csv"))?;
        groups
            .entry((m.population.clone(), m.seed))
            .or_default()
            .insert(m.policy.clone(), ovh);
    }
    let mut plain = Vec::new();
    let mut pmrr = Vec::new();
    for ((pop, seed), by_policy) in &groups {
        let Some(bt) = by_policy.get("bt") else { continue };
        let scenario = format!("population@{seed}/{}", pop.len());
        for (policy, sink) in [("locality", &mut plain), ("locality_pm_rr", &mut pmrr)] {
            let Some(loc) = by_policy.get(policy) else { continue };
            for (&(isp, ob), &(_, ol)) in bt.iter().zip(loc) {
                if pop.get(isp).is_some_and(|&n| n > 0) {
                    sink.push(CalibrationSample {
                        scenario: scenario.clone(),
                        as_size: pop[isp],
                        overhead_bt: ob,
                        overhead_locality: ol,
                    });
                }
            }
        }
    }
    if plain.is_empty() && pmrr.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: no BitTorrent/locality run pairs over the same population",
            root.display()
        )));
    }
    for (name, v) in [("locality", &plain), ("locality+PM+RR", &pmrr)] {
        if v.is_empty() {
            eprintln!("warning: no {name} runs found; that curve is zero");
        }
    }
    Ok(CurveSet {
        locality: calibrate_curve(&plain)?,
        locality_pm_rr: calibrate_curve(&pmrr)?,
    })
}

fn estimate(census_path: &Path, curves: Option<&Path>, from: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let census = with_path(census_path, Census::parse(&read(census_path)?))?;
    let curves = match (curves, from) {
        (Some(p), _) => with_path(p, CurveSet::parse(&read(p)?))?,
        (None, Some(dir)) => curves_from_runs(dir)?,
        (None, None) => return Err(CliError::Usage("need --curves or --calibrate-from".into())),
    };
    let largest = census
        .torrents
        .iter()
        .flat_map(|t| t.ases.iter().map(|a| a.peer_count))
        .max()
        .unwrap_or(0) as f64;
    for (name, c) in [("locality", &curves.locality), ("locality+PM+RR", &curves.locality_pm_rr)] {
        let top = c.anchors().last().map_or(1.0, |a| a.0);
        if largest > top {
            eprintln!("warning: {name} curve ends at {top} peers/AS; larger ASes (up to {largest}) use the last value");
        }
    }
    let report = aggregate(&census, &curves)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    for (name, text) in [
        ("cumulative.csv", report.cumulative_csv()),
        ("per_as.csv", report.per_as_csv()),
        ("totals.csv", report.totals_csv()),
        ("curves.csv", curves.to_text()),
    ] {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
    }
    print!("{}", report.totals_csv());
    if !report.totals.is_ordered() {
        eprintln!("warning: totals are not ordered ideal <= locality+PM+RR <= locality <= bittorrent");
    }
    Ok(())
}

fn validate(path: &Path) -> Result<(), CliError> {
    let text = read(path)?;
    let kind = if text.contains("schema_version") {
        with_path(path, ScenarioConfig::from_toml(&text))?;
        "scenario"
    } else if text.contains("parameter") && text.contains("values") {
        with_path(path, SweepSpec::from_toml(&text))?;
        "sweep spec"
    } else if text.contains("torrent_id,content_bytes") {
        with_path(path, Census::parse(&text))?;
        "census"
    } else if text.contains("peers_per_as") {
        with_path(path, CurveSet::parse(&text))?;
        "curves"
    } else {
        with_path(path, AsDistribution::parse(&text))?;
        "AS distribution"
    };
    println!("{}: valid {kind}", path.display());
    Ok(())
}
