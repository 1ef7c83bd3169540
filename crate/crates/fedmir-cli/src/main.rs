use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};

use fedmir_cli::config::load_config;
use fedmir_cli::report::cmd_report;
use fedmir_cli::runner::{cmd_run, cmd_sweep, SweepAxis};

#[derive(Parser)]
#[command(
    name = "fedmir",
    version,
    about = "Clustered federated learning simulator with a membership-inference red team"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configured experiment (all repeats) and write result files.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to FEDMIR_OUT_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed (flag beats FEDMIR_SEED beats config).
        #[arg(long)]
        seed: Option<u64>,
        /// Wall-clock budget; repeats not started in time are skipped and
        /// the run is marked incomplete.
        #[arg(long)]
        max_seconds: Option<f64>,
    },
    /// Run both algorithms across a sweep axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: AxisArg,
        /// Comma-separated axis values, e.g. 0.1,0.3,0.5.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_seconds: Option<f64>,
    },
    /// Aggregate results.csv files into summary.csv and a console digest.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    MinorityFraction,
    DeformationGap,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::MinorityFraction => SweepAxis::MinorityFraction,
            AxisArg::DeformationGap => SweepAxis::DeformationGap,
        }
    }
}

fn resolve_out(flag: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Ok(env) = std::env::var("FEDMIR_OUT_DIR") {
        if !env.is_empty() {
            return Ok(PathBuf::from(env));
        }
    }
    anyhow::bail!("no output directory: pass --out or set FEDMIR_OUT_DIR");
}

fn resolve_seed(flag: Option<u64>) -> anyhow::Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("FEDMIR_SEED") {
        Ok(text) => {
            let seed = text
                .parse::<u64>()
                .map_err(|_| anyhow::anyhow!("FEDMIR_SEED must be an unsigned integer"))?;
            Ok(Some(seed))
        }
        Err(_) => Ok(None),
    }
}

fn deadline_from(max_seconds: Option<f64>) -> anyhow::Result<Option<Instant>> {
    match max_seconds {
        None => Ok(None),
        Some(s) if s.is_finite() && s > 0.0 => {
            Ok(Some(Instant::now() + Duration::from_secs_f64(s)))
        }
        Some(_) => anyhow::bail!("--max-seconds must be positive"),
    }
}

fn parse_values(text: &str) -> anyhow::Result<Vec<f64>> {
    let values = text
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| anyhow::anyhow!("bad sweep value `{s}`")))
        .collect::<anyhow::Result<Vec<f64>>>()?;
    if values.is_empty() {
        anyhow::bail!("--values needs at least one number");
    }
    Ok(values)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run { config, out, seed, max_seconds } => {
            let out = resolve_out(out)?;
            let deadline = deadline_from(max_seconds)?;
            let mut cfg = load_config(&config)?;
            if let Some(seed) = resolve_seed(seed)? {
                cfg.seed = seed;
            }
            Ok(cmd_run(&cfg, &out, deadline)?)
        }
        Command::Sweep { config, axis, values, out, seed, max_seconds } => {
            let out = resolve_out(out)?;
            let deadline = deadline_from(max_seconds)?;
            let values = parse_values(&values)?;
            let mut cfg = load_config(&config)?;
            if let Some(seed) = resolve_seed(seed)? {
                cfg.seed = seed;
            }
            Ok(cmd_sweep(&cfg, axis.into(), &values, &out, deadline)?)
        }
        Command::Report { input } => {
            let digest = cmd_report(&input)?;
            print!("{digest}");
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("incomplete: wall-clock budget exhausted before all repeats finished");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
