use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod output;

/// Flow-level BitTorrent swarm simulator with an ISP-locality tracker.
#[derive(Parser, Debug)]
#[command(name = "swarmsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Target {
    /// Named preset, see `swarmsim presets`.
    #[arg(long, conflicts_with = "scenario")]
    preset: Option<String>,
    /// Scenario TOML file.
    scenario: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum EventDetail {
    Summary,
    Full,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one scenario and write its metrics.
    Run {
        #[command(flatten)]
        target: Target,
        /// RNG seed; for presets it also drives peer layout.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root; the run goes to `<out>/<name>-s<seed>`.
        #[arg(long, env = "SWARMSIM_OUT", default_value = "out")]
        out: PathBuf,
        /// Horizon as a multiple of the ideal completion time.
        #[arg(long)]
        t_max_factor: Option<f64>,
        /// Event log detail.
        #[arg(long, value_enum)]
        events: Option<EventDetail>,
    },
    /// Run a parameter sweep described by a TOML spec.
    Sweep {
        spec: PathBuf,
        /// Replaces the spec's base preset.
        #[arg(long)]
        preset: Option<String>,
        /// Replaces the spec's base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "SWARMSIM_OUT", default_value = "out")]
        out: PathBuf,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        t_max_factor: Option<f64>,
    },
    /// Estimate inter-AS traffic of a census under each policy.
    Estimate {
        census: PathBuf,
        /// Curves file (`peers_per_as,locality,locality_pm_rr`).
        #[arg(long, conflicts_with = "calibrate_from", required_unless_present = "calibrate_from")]
        curves: Option<PathBuf>,
        /// Directory of `swarmsim run` outputs to calibrate curves from.
        #[arg(long)]
        calibrate_from: Option<PathBuf>,
        #[arg(long, env = "SWARMSIM_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Derive savings curves by simulating reference torrent presets.
    Calibrate {
        /// Base preset names without the policy part.
        #[arg(long, value_delimiter = ',', default_value = "torrent1,torrent3")]
        torrents: Vec<String>,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seed: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Curves file to write.
        #[arg(long, default_value = "curves.csv")]
        out: PathBuf,
    },
    /// Check a scenario file, sweep spec, census or AS distribution.
    Validate { file: PathBuf },
    /// List the named presets.
    Presets,
    /// Print a preset as a scenario TOML file.
    ExportScenario {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        t_max_factor: Option<f64>,
    },
    /// Write a synthetic torrent census.
    GenCensus {
        #[arg(long, default_value_t = 1000)]
        torrents: usize,
        #[arg(long, default_value_t = 50)]
        max_ases: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("swarmsim: {e}");
            ExitCode::from(e.code())
        }
    }
}
