//! `evoprune` command line: train a baseline network, compress it by
//! evolving filter masks, evaluate checkpoints, and emit compression
//! reports and greedy-baseline comparisons.

mod commands;
mod config;

use anyhow::Result;
use clap::{Parser, Subcommand};
use config::{Overrides, RunConfig};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "evoprune",
    about = "Evolutionary filter-mask compression for small conv nets",
    version
)]
struct Cli {
    /// Config file (TOML, flat sections); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Data directory holding the MNIST IDX files
    /// (default: $EVOPRUNE_DATA_DIR or ./data).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    /// Dataset: `mnist` or `blobs` (synthetic smoke data).
    #[arg(long, global = true)]
    dataset: Option<String>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Master seed for training, search and fine-tuning.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Sparsity trade-off weight.
    #[arg(long, global = true)]
    lambda: Option<f64>,

    /// Population size K.
    #[arg(long, global = true)]
    population: Option<usize>,

    /// Generation count T.
    #[arg(long, global = true)]
    iterations: Option<usize>,

    /// Parameter preset: `desk` (minutes) or `paper` (hours).
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Concurrent fitness evaluations (0 = one per CPU).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a baseline network and save its checkpoint.
    Train {
        /// Architecture: `lenet`, `tiny`, or `auto` (matches the dataset).
        #[arg(long, default_value = "auto")]
        arch: String,
    },
    /// Evolve a filter mask for a trained checkpoint; writes the best
    /// individual, the compacted fine-tuned network and the evolution log.
    Compress {
        #[arg(long)]
        model: PathBuf,
        /// Replace network error with the deterministic mask surrogate
        /// (no data needed; used for GA verification).
        #[arg(long)]
        surrogate: bool,
    },
    /// Report the error of a checkpoint on the test or train split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Emit per-layer compression tables, structured records and filter
    /// images for a checkpoint plus mask.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        individual: PathBuf,
        /// Compacted checkpoint; enables before/after accuracy and
        /// compressed-filter export.
        #[arg(long)]
        compact: Option<PathBuf>,
    },
    /// Greedy threshold baselines and scratch/random-architecture controls,
    /// emitted in the same report format as compression runs.
    Baseline {
        #[arg(long)]
        model: PathBuf,
        /// Reference individual for budget matching and control
        /// architectures.
        #[arg(long)]
        individual: Option<PathBuf>,
        /// Weight-magnitude threshold for the sparsity statistics.
        #[arg(long)]
        weight_tau: Option<f32>,
        /// Filter-norm threshold; derived from the reference budget when
        /// omitted.
        #[arg(long)]
        filter_tau: Option<f64>,
        /// Seeds for the scratch and random-architecture controls.
        #[arg(long, default_value_t = 3)]
        control_seeds: usize,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    let mut overrides = Overrides {
        seed: cli.seed,
        lambda: cli.lambda,
        population: cli.population,
        iterations: cli.iterations,
        preset: cli.preset.clone(),
        workers: cli.workers,
        data_dir: cli.data_dir.clone(),
        dataset: cli.dataset.clone(),
        surrogate: false,
    };
    if let Command::Compress { surrogate: true, .. } = &cli.command {
        overrides.surrogate = true;
    }
    let config = RunConfig::resolve(cli.config.as_deref(), &overrides)?;

    match &cli.command {
        Command::Train { arch } => commands::cmd_train(&config, arch, &cli.out),
        Command::Compress { model, .. } => commands::cmd_compress(&config, model, &cli.out),
        Command::Evaluate { model, split } => {
            commands::cmd_evaluate(&config, model, split, &cli.out)
        }
        Command::Report {
            model,
            individual,
            compact,
        } => commands::cmd_report(&config, model, individual, compact.as_deref(), &cli.out),
        Command::Baseline {
            model,
            individual,
            weight_tau,
            filter_tau,
            control_seeds,
        } => commands::cmd_baseline(
            &config,
            model,
            individual.as_deref(),
            *weight_tau,
            *filter_tau,
            *control_seeds,
            &cli.out,
        ),
    }
}
