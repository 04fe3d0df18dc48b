//! Experiment runner for `tensor-mdp`: simulation, estimation, clustering,
//! sweeps and the SDE reference model.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod metrics;
pub mod problem;
pub mod svg;

use config::{ExperimentConfig, SEED_ENV};

#[derive(Debug, Parser)]
#[command(name = "tensor-mdp", version, about = "State and action abstractions from low-rank transition tensors")]
pub struct Cli {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; overrides `experiment.out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for `sweep`.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    pub print_effective_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample one trajectory per seed.
    Simulate,
    /// Fit the tensor estimator and both baselines to a dataset.
    Estimate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Use only the first N transitions.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Cluster states and actions on a fitted model's embeddings.
    Cluster {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Every sample size, rank tuple, seed and method.
    Sweep,
    /// Build the SDE ground-truth reference.
    MakeReference {
        /// Where to write it; overrides `reference.path`.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

/// The configuration after applying file, flags and environment.
pub fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.experiment.out = out.display().to_string();
    }
    let env = std::env::var(SEED_ENV).ok();
    cfg.resolve_seeds(cli.seed, env.as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    if cli.print_effective_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        anyhow::bail!("no subcommand given; see --help");
    };
    let ctx = commands::RunContext { cfg, jobs: cli.jobs };
    let outputs = match command {
        Command::Simulate => commands::simulate(&ctx)?,
        Command::Estimate { dataset, n } => commands::estimate(&ctx, dataset.as_deref(), *n)?,
        Command::Cluster { model, dataset } => commands::cluster(&ctx, model.as_deref(), dataset.as_deref())?,
        Command::Sweep => commands::sweep(&ctx)?,
        Command::MakeReference { reference } => commands::make_reference(&ctx, reference.as_deref())?,
    };
    for p in outputs {
        println!("{}", p.display());
    }
    Ok(())
}
