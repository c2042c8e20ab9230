// SPDX-License-Identifier: MIT OR Apache-2.0

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use countlab::LabError;

use crate::config::{config_error, ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "countlab", version, about = "Counting circuits: build, evaluate, intervene")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, env = "COUNTLAB_SEED")]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Construct the counting model and write its weights.
    Build,
    /// Sample tasks and write the model's continuations.
    Gen,
    /// Binned accuracy and MAE per mode.
    Eval,
    /// Answer distribution for single-partition contexts.
    Heatmap,
    /// Attention mass along selected edges per head.
    Attn,
    /// Decode the count carried by each list token.
    Probe,
    /// Zero-ablate tokens and record probability drops.
    Ablate,
    /// Knock out attention edges in every head.
    Knockout,
    /// Swap one step between two contexts.
    Xpatch,
    /// Per-layer masking and unmasking curves.
    Layers,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Build => "build",
            Self::Gen => "gen",
            Self::Eval => "eval",
            Self::Heatmap => "heatmap",
            Self::Attn => "attn",
            Self::Probe => "probe",
            Self::Ablate => "ablate",
            Self::Knockout => "knockout",
            Self::Xpatch => "xpatch",
            Self::Layers => "layers",
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.is::<ConfigError>()
            || matches!(
                e.downcast_ref::<LabError>(),
                Some(
                    LabError::Config(_)
                        | LabError::Construction(_)
                        | LabError::Selector(_)
                        | LabError::Generation(_)
                        | LabError::UnknownWord(_)
                )
            )
    });
    if config {
        1
    } else {
        2
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.out.is_some() {
        cfg.out = cli.out;
    }
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    if let Some(jobs) = cfg.jobs {
        if jobs == 0 {
            return Err(config_error("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| config_error(format!("cannot start {jobs} workers: {e}")))?;
    }
    commands::dispatch(cli.command, &cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
