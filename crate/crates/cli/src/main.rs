//! `ptmap` command line: fits, wavy profiling and Lorenz-63 experiments.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable holding the log filter (e.g. `info`, `ptmap=debug`).
const LOG_ENV: &str = "PTMAP_LOG";

#[derive(Debug)]
pub enum CliError {
    /// Malformed config, bad input file, or I/O failure (exit 2).
    Config(String),
    /// Fitting or evaluation failure (exit 3).
    Compute(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Compute(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Compute(m) => write!(f, "computation failed: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "ptmap", version, about = "Adaptive P-spline triangular transport maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a map to an ensemble table.
    Fit(CommonArgs),
    /// Profile the smoothing parameter on the wavy target.
    Wavy(CommonArgs),
    /// Run Lorenz-63 twin experiments.
    Lorenz63(CommonArgs),
}

#[derive(Args, Clone)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Added to every configured seed.
    #[arg(long, default_value_t = 0)]
    pub seed_offset: u64,
    /// Worker threads; 1 gives bit-reproducible scheduling. Default: all cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    let (args, expected) = match &cli.command {
        Command::Fit(a) => (a, config::Experiment::Fit),
        Command::Wavy(a) => (a, config::Experiment::Wavy),
        Command::Lorenz63(a) => (a, config::Experiment::Lorenz63),
    };
    match commands::run(args, expected) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ptmap: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
