//! `hilora` command-line driver.

mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "hilora", version, about = "Hierarchical LoRA federated-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the full hierarchy and write metrics, logs and checkpoints.
    Run(ExperimentArgs),
    /// Run the root stage and clustering; print the clustering JSON.
    ClusterDiag(ExperimentArgs),
    /// Route and fine-tune the unseen clients of a finished run.
    Adapt(RunDirArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Recompute the metrics of a finished run from its checkpoints.
    Report(RunDirArgs),
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for client updates; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides `federation.master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunDirArgs {
    /// Directory written by `hilora run`.
    #[arg(long)]
    run: PathBuf,
    /// Output directory (defaults to the run directory for `adapt` and to
    /// `<run>/report` for `report`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Experiment config; the built-in defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.federation.master_seed = seed;
    }
    Ok(cfg)
}

fn workers(requested: Option<usize>) -> usize {
    requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = load(&args.config, args.seed)?;
            let out = args
                .out
                .or_else(|| cfg.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            commands::run(&cfg, workers(args.workers), &out)
        }
        Command::ClusterDiag(args) => {
            let cfg = load(&args.config, args.seed)?;
            commands::cluster_diag(&cfg, workers(args.workers), args.out.as_deref())
        }
        Command::Adapt(args) => {
            let out = args.out.unwrap_or_else(|| args.run.clone());
            commands::adapt(&args.run, &out)
        }
        Command::Gradcheck(args) => {
            let mut cfg = match &args.config {
                Some(path) => ExperimentConfig::load(path)?,
                None => ExperimentConfig::default(),
            };
            if let Some(seed) = args.seed {
                cfg.federation.master_seed = seed;
            }
            commands::gradcheck(&cfg)
        }
        Command::Report(args) => {
            let out = args.out.unwrap_or_else(|| args.run.join("report"));
            commands::report(&args.run, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
