//! `deffa`: preprocessing, balancing, augmentation, training and evaluation
//! of the dual-encoder vessel segmentation model.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "deffa", version, about = "Retinal vessel segmentation pipeline")]
pub struct Cli {
    /// Pipeline configuration (TOML); flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// More log output (repeat for trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

/// A dataset directory with `images/`, `masks/` and optional `fov/`.
#[derive(Args, Debug, Clone)]
pub struct DataArg {
    /// Dataset directory [default: $DEFFA_DATA_ROOT].
    #[arg(long, env = "DEFFA_DATA_ROOT", value_name = "DIR")]
    pub data: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the enhanced single-channel input of every sample.
    Prep(PrepArgs),
    /// Compute reference color statistics of a dataset.
    Stats(StatsArgs),
    /// Cluster by vessel-mask similarity and top up small clusters.
    Balance(BalanceArgs),
    /// Add color-statistics augmented copies of every sample.
    Augment(AugmentArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a model on a dataset.
    Eval(EvalArgs),
    /// Score one model on several datasets.
    Crossval(CrossvalArgs),
    /// Train and score the ablation variants.
    Ablate(AblateArgs),
    /// Render TP/FP/FN composites.
    Overlay(OverlayArgs),
}

#[derive(Args, Debug)]
pub struct PrepArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Local-average window (odd).
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub alpha_enh: Option<f64>,
    /// Keep the raw enhanced field instead of rescaling to [0, 1].
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Name stored with the statistics [default: dataset directory name].
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug)]
pub struct BalanceArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Largest cluster count tried [default: min(10, N - 1)].
    #[arg(long)]
    pub kmax: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write `cluster_report.json`.
    #[arg(long)]
    pub report: bool,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Reference statistics from `deffa stats` [default: the dataset's own].
    #[arg(long, value_name = "FILE")]
    pub ref_stats: Option<PathBuf>,
    #[arg(long)]
    pub alpha_min: Option<f64>,
    #[arg(long)]
    pub alpha_max: Option<f64>,
    /// Rotations are drawn from [-ROT, ROT] degrees.
    #[arg(long, value_name = "ROT")]
    pub rot: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Augmented copies per source sample.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Continue from a checkpoint (optimizer moments restart).
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Enable per-epoch color-statistics augmentation with these statistics.
    #[arg(long, value_name = "FILE")]
    pub ref_stats: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Save `epoch_<n>.ckpt` every N epochs.
    #[arg(long, value_name = "N")]
    pub checkpoint_every: Option<usize>,
    /// Training resolution, e.g. `128x128`.
    #[arg(long, value_parser = parse_size, value_name = "HxW")]
    pub image_size: Option<[usize; 2]>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "CKPT")]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArg,
    /// Directory of FOV masks [default: <data>/fov, or the full frame].
    #[arg(long, value_name = "DIR")]
    pub fov: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Average per-image AUCs instead of pooling all pixels.
    #[arg(long)]
    pub per_image_auc: bool,
    /// Score at the stored resolution instead of the training resolution.
    #[arg(long)]
    pub native_size: bool,
    /// Also write `<id>__prob.png` for every sample.
    #[arg(long)]
    pub save_predictions: bool,
}

#[derive(Args, Debug)]
pub struct CrossvalArgs {
    #[arg(long, value_name = "CKPT")]
    pub model: PathBuf,
    /// Name of the training dataset [default: recorded in the checkpoint].
    #[arg(long)]
    pub trained_on: Option<String>,
    /// Target dataset as `NAME=DIR` or `DIR`; repeatable.
    #[arg(long = "target", value_name = "NAME=DIR", required = true)]
    pub targets: Vec<String>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Scoring dataset [default: the training data].
    #[arg(long, value_name = "DIR")]
    pub eval_data: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Comma-separated subset, e.g. `baseline,+fff` [default: all six].
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Augmented copies per sample for variants using color statistics.
    #[arg(long, default_value_t = 1)]
    pub copies: usize,
    #[arg(long, value_parser = parse_size, value_name = "HxW")]
    pub image_size: Option<[usize; 2]>,
}

#[derive(Args, Debug)]
pub struct OverlayArgs {
    #[arg(long, value_name = "CKPT")]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

fn parse_size(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok([parse(h)?, parse(w)?])
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
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match commands::run(&cli) {
        Ok(commands::Status::Complete) => ExitCode::SUCCESS,
        Ok(commands::Status::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
