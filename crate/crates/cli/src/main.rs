//! `stablefreq`: train, certify and compare monotone frequency controllers.
//!
//! Exit status: 0 success (or certified), 1 refuted, 2 usage or
//! configuration error, 3 runtime failure.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// Core errors caused by bad inputs count as configuration errors.
    pub fn core(e: stablefreq_core::Error) -> Self {
        use stablefreq_core::Error as E;
        match e {
            E::Io { .. } | E::Parse(_) | E::Invariant { .. } | E::Config(_) | E::NonMonotoneTarget { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "stablefreq", version, about = "Stable monotone frequency controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a monotone controller with BPTT.
    Train(Common),
    /// Train the same controller family with REINFORCE.
    PgTrain(Common),
    /// Tune linear droop gains on the training loss.
    DroopFit(Common),
    /// Run the Lyapunov certificate on a controller file.
    Certify(Common),
    /// Roll out a controller and write trajectories.
    Simulate(Common),
    /// Train all three methods and sweep the initial-condition range.
    Compare(Common),
    /// Fit a monotone target with a single bus controller.
    ApproxFit(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &common.out {
        let cwd = std::env::current_dir().map_err(|e| CliError::Runtime(e.to_string()))?;
        cfg.out = Some(cwd.join(o));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<commands::Outcome, CliError> {
    let (common, f): (&Common, fn(&ExperimentConfig) -> Result<commands::Outcome, CliError>) = match &cli.command {
        Command::Train(c) => (c, commands::train),
        Command::PgTrain(c) => (c, commands::pg_train),
        Command::DroopFit(c) => (c, commands::droop_fit),
        Command::Certify(c) => (c, commands::certify),
        Command::Simulate(c) => (c, commands::simulate),
        Command::Compare(c) => (c, commands::compare),
        Command::ApproxFit(c) => (c, commands::approx_fit),
    };
    f(&load(common)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(out) => {
            for f in &out.artifacts.files {
                println!("{}  {}", f.sha256, f.path);
            }
            if out.refuted {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
