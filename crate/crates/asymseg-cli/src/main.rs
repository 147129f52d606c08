use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use asymseg_cli::commands;
use asymseg_cli::config::{load_config, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "asymseg",
    version,
    about = "Train, fuse, and score unbalanced 3D segmentation experiments"
)]
struct Cli {
    /// Experiment configuration (TOML); required by every subcommand
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the seed recorded in the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for data-parallel loops (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic volume/mask pairs
    GenData { out_dir: PathBuf },
    /// Train a stencil model on paired volume/mask files
    Train { data_dir: PathBuf, out_dir: PathBuf },
    /// Patch-fused inference: write probability map and thresholded mask
    Predict {
        model: PathBuf,
        volume: PathBuf,
        out_dir: PathBuf,
        /// Fusion mode (tiling, uniform, spline); overrides the config
        #[arg(long)]
        fusion: Option<String>,
    },
    /// Score a predicted mask or probability map against ground truth
    Evaluate {
        prediction: PathBuf,
        ground_truth: PathBuf,
        out_dir: PathBuf,
        /// Voxel spacing in mm as sx,sy,sz (default: ground-truth header)
        #[arg(long, value_delimiter = ',')]
        spacing: Option<Vec<f64>>,
    },
    /// Train one model per beta and tabulate held-out metrics
    SweepBeta {
        data_dir: PathBuf,
        out_dir: PathBuf,
        /// Comma-separated beta values (at least two)
        #[arg(long, value_delimiter = ',', required = true)]
        betas: Vec<f64>,
    },
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .context("--config <PATH> is required")?;
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if !asymseg::configure_threads(threads) {
            eprintln!("note: --threads ignored (sequential build or pool already set)");
        }
    }
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::GenData { out_dir } => commands::cmd_gen_data(&cfg, out_dir),
        Command::Train { data_dir, out_dir } => commands::cmd_train(&cfg, data_dir, out_dir),
        Command::Predict {
            model,
            volume,
            out_dir,
            fusion,
        } => {
            let mode = fusion.as_deref().map(str::parse).transpose()?;
            commands::cmd_predict(&cfg, model, volume, mode, out_dir)
        }
        Command::Evaluate {
            prediction,
            ground_truth,
            out_dir,
            spacing,
        } => commands::cmd_evaluate(&cfg, prediction, ground_truth, spacing.clone(), out_dir),
        Command::SweepBeta {
            data_dir,
            out_dir,
            betas,
        } => commands::cmd_sweep_beta(&cfg, data_dir, betas, out_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
