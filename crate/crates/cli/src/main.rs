//! `atlab`: generate data, pretrain, adapt, evaluate and run ablations in one experiment directory.

mod commands;
mod workdir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "atlab", version, about = "Teacher-student domain adaptation on synthetic scenes")]
pub struct Cli {
    /// Experiment config (TOML). Defaults to the directory's snapshot, or the reference fog setup.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the scene and training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment directory.
    #[arg(long, global = true, default_value = "experiment")]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Validate inputs and print the plan without running.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Teacher,
    Student,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render all splits, the target label sidecar and a manifest.
    GenData,
    /// Source-only burn-in.
    Pretrain,
    /// Teacher-student adaptation from the pretrained checkpoint.
    Adapt {
        /// Initial checkpoint (defaults to checkpoints/pretrain.ckpt).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue an interrupted run from one of its checkpoints.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
        /// Stop after this many adaptation iterations and checkpoint.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        /// Defaults to checkpoints/adapt_final.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "target_test")]
        split: String,
        #[arg(long, value_enum, default_value = "teacher")]
        which: Which,
    },
    /// Run baselines, ablation variants and the λ_dis sweep.
    Ablate,
    /// Turn a metrics log into CSV curves and SVG plots.
    Curves {
        /// Defaults to metrics.log in the experiment directory.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
