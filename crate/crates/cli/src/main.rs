//! `xover`: batch front end for optimal crossover design experiments.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical
//! failure.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xover_core::Error;

use crate::config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn from_csv(e: csv::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::SingularCovariance { .. }
            | Error::NonEstimable { .. }
            | Error::NonEstimablePoint { .. }
            | Error::NoEstimableStart { .. }
            | Error::RankDeficient { .. }
            | Error::Divergence { .. }
            | Error::Separation { .. }
            | Error::Insufficient(_)
            | Error::ExcessiveFailures { .. }
            | Error::MeanOutOfRange { .. } => CliError::Numerical(msg),
            _ => CliError::Config(msg),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "xover", version, about = "Bayesian D-optimal crossover designs for GLMs under GEE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides [outputs] dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps and replications.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimal weights for every (structure, alpha) cell.
    Optimize(Common),
    /// Efficiencies of comparison designs against the optimum.
    Efficiency(Common),
    /// Fit a GEE model to a trial dataset.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV; overrides [fit] dataset.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Simulate a trial and optionally check predicted variances.
    Simulate(Common),
    /// Enumerate Latin, Williams and extra-period designs.
    Catalog(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, data) = match cli.command {
        Command::Optimize(ref c) | Command::Efficiency(ref c) | Command::Simulate(ref c) | Command::Catalog(ref c) => {
            (c, None)
        }
        Command::Fit { ref common, ref data } => (common, data.clone()),
    };
    if let Some(w) = common.workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let raw = ExperimentConfig::load(&common.config)?;
    let base = common.config.parent().unwrap_or(Path::new("."));
    let mut exp = raw.resolve(base)?;
    if let Some(seed) = common.seed {
        exp.seed = seed;
    }
    let dir = commands::output_dir(&exp, common.out.clone())?;
    match cli.command {
        Command::Optimize(_) => commands::optimize(&exp, &dir),
        Command::Efficiency(_) => commands::efficiency(&exp, &dir),
        Command::Fit { .. } => commands::fit_command(&exp, &dir, data),
        Command::Simulate(_) => commands::simulate(&exp, &dir),
        Command::Catalog(_) => commands::catalog(&exp, &dir),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("xover: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
