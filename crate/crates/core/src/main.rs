use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spinlab::config::{Experiment, ExperimentConfig};
use spinlab::{experiments, par, Error};

const EXIT_VIOLATION: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BOX: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

/// Energy-defect bounds, scaling grids and Monte Carlo studies for long-range O(n) spin models.
#[derive(Parser)]
#[command(name = "spinlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// |Δ| against U for random configurations.
    BoundSuite(RunArgs),
    /// Pair sums, model sums and fitted slopes over an (L, a) grid.
    ScalingGrid(RunArgs),
    /// Metropolis chains with the defect-distribution tests.
    McStudy(RunArgs),
    /// Exhaustive wedge-map check.
    WedgeCheck(RunArgs),
    /// Block-smoothing ratio against block separation.
    SmoothingScan(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// key = value config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "spinlab-out")]
    out: PathBuf,
    /// Worker threads (1 for bit-reproducible runs).
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue Monte Carlo chains from their snapshots.
    #[arg(long)]
    resume: bool,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidParameter(_) => EXIT_CONFIG,
        Error::BoxTooSmall { .. } => EXIT_BOX,
        _ => EXIT_RUNTIME,
    }
}

fn execute(experiment: Experiment, args: &RunArgs) -> Result<experiments::Outcome, Error> {
    let mut cfg = ExperimentConfig::from_file(experiment, &args.config)?;
    if let Some(seed) = args.seed {
        cfg.set("seed", seed);
    }
    for w in cfg.model().map(|m| m.warnings()).unwrap_or_default() {
        eprintln!("warning: {w}");
    }
    experiments::run(experiment, &cfg, &args.out, args.resume)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, args) = match &cli.command {
        Command::BoundSuite(a) => (Experiment::BoundSuite, a),
        Command::ScalingGrid(a) => (Experiment::ScalingGrid, a),
        Command::McStudy(a) => (Experiment::McStudy, a),
        Command::WedgeCheck(a) => (Experiment::WedgeCheck, a),
        Command::SmoothingScan(a) => (Experiment::SmoothingScan, a),
    };
    if let Some(t) = args.threads {
        par::configure_threads(t);
    }
    match execute(experiment, args) {
        Ok(outcome) => {
            for note in &outcome.notes {
                println!("{note}");
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            println!("{}: {} checks, {} violations", experiment.name(), outcome.checks, outcome.violations);
            if outcome.violations > 0 {
                ExitCode::from(EXIT_VIOLATION)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
