//! `rollplane` command line.
//!
//! Flags may also come from `ROLLPLANE_*` environment variables. A flag beats
//! its variable, and both beat the config or scenario file.

pub mod config;
mod run;
mod sim;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{Config, ConfigError, Overrides};

#[derive(Debug, Parser)]
#[command(name = "rollplane", version, about = "RL rollout data plane: stack, simulator and tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start every service, run the task file through the stack, keep serving.
    Serve(ServeArgs),
    /// Simulate the scenario's strategy.
    Simulate(SimArgs),
    /// Simulate all four strategies on the same inputs.
    Compare(SimArgs),
    /// Re-plan a rollout-manager event log offline.
    Replay(ReplayArgs),
    /// Run the task file headless and write trajectories.
    ExportTraj(StackArgs),
}

#[derive(Debug, Args)]
pub struct StackArgs {
    #[arg(long, env = "ROLLPLANE_CONFIG")]
    pub config: PathBuf,
    /// Task file; overrides `dataloader.source`.
    #[arg(long, env = "ROLLPLANE_TASKS")]
    pub tasks: Option<PathBuf>,
    #[arg(long, env = "ROLLPLANE_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "ROLLPLANE_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub stack: StackArgs,
    #[arg(long, env = "ROLLPLANE_HOST")]
    pub host: Option<String>,
    /// Shut down once every task is trained instead of waiting for Ctrl-C.
    #[arg(long)]
    pub exit_when_done: bool,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long, env = "ROLLPLANE_SCENARIO")]
    pub scenario: PathBuf,
    #[arg(long, env = "ROLLPLANE_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "ROLLPLANE_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Exit 1 unless spatiotemporal bubble is at most every baseline's.
    #[arg(long)]
    pub assert_dominance: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub log: PathBuf,
    /// Controller state to compare the replayed final state against.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot parse scenario {path}: {message}")]
    Scenario { path: PathBuf, message: String },
    #[error("cannot parse snapshot {path}: {message}")]
    Snapshot { path: PathBuf, message: String },
    #[error(transparent)]
    Sim(#[from] rollplane_core::sim::SimError),
    #[error(transparent)]
    Replay(#[from] rollplane_core::replay::ReplayError),
    #[error(transparent)]
    Runtime(#[from] rollplane_core::runtime::RuntimeError),
    #[error(transparent)]
    Serve(#[from] rollplane_server::ServeError),
    #[error(transparent)]
    Setup(#[from] rollplane_server::SetupError),
    #[error("task file {path}: {source}")]
    Tasks {
        path: PathBuf,
        #[source]
        source: rollplane_core::dataloader::LoadError,
    },
    #[error("no task file: set dataloader.source or pass --tasks")]
    NoTasks,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

/// What a successful command concluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// An asserted check failed: dominance, or replay divergence.
    CheckFailed,
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Serve(a) => run::serve(a),
        Command::ExportTraj(a) => run::export(a),
        Command::Simulate(a) => sim::simulate(a),
        Command::Compare(a) => sim::compare(a),
        Command::Replay(a) => run::replay(a),
    }
}

pub(crate) fn write_file(path: &std::path::Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(CliError::io(path))
}

pub(crate) fn ensure_dir(dir: &std::path::Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}
