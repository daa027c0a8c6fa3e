use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use disentangle_core::{GramAxis, PoolingOrder};

/// Train and evaluate feature-disentangling projectors over frozen
/// vision-language features.
#[derive(Debug, Parser)]
#[command(name = "disentangle", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write an entangled synthetic dataset with planted ground truth.
    #[command(args_override_self = true)]
    GenSynthetic(GenSyntheticArgs),
    /// Train projectors with ASL plus the MFI penalty.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Score a split and report mAP, precision and the MFI statistic.
    #[command(args_override_self = true)]
    EvalMlr(EvalMlrArgs),
    /// Write per-record segmentation masks as PGM files.
    #[command(args_override_self = true)]
    Segment(SegmentArgs),
    /// Compare class entanglement of raw and projected text features.
    #[command(args_override_self = true)]
    AnalyzeMfi(AnalyzeMfiArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSynthetic(_) => "gen-synthetic",
            Command::Train(_) => "train",
            Command::EvalMlr(_) => "eval-mlr",
            Command::Segment(_) => "segment",
            Command::AnalyzeMfi(_) => "analyze-mfi",
        }
    }
}

/// `HxW`, e.g. `4x4`.
pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad extent {v:?}: {e}"))
    };
    Ok((parse(h)?, parse(w)?))
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    /// Flat `key = value` file of flag defaults; flags on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Spatial grid as HxW.
    #[arg(long, default_value = "4x4", value_parser = parse_size)]
    pub grid: (usize, usize),
    /// Entanglement weight of the shared direction; overrides --target-similarity.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Mean pairwise cosine of the class directions, used when --rho is absent.
    #[arg(long, default_value_t = 0.75)]
    pub target_similarity: f64,
    /// Training images.
    #[arg(long, default_value_t = 400)]
    pub samples: usize,
    #[arg(long, default_value_t = 1000)]
    pub test_samples: usize,
    /// Per-cell noise standard deviation, relative to a unit feature.
    #[arg(long, default_value_t = 0.7)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.01)]
    pub text_noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GramAxisArg {
    Classes,
    Features,
}

impl From<GramAxisArg> for GramAxis {
    fn from(a: GramAxisArg) -> Self {
        match a {
            GramAxisArg::Classes => GramAxis::Classes,
            GramAxisArg::Features => GramAxis::Features,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PoolingArg {
    ProjectThenPool,
    PoolThenProject,
}

impl From<PoolingArg> for PoolingOrder {
    fn from(a: PoolingArg) -> Self {
        match a {
            PoolingArg::ProjectThenPool => PoolingOrder::ProjectThenPool,
            PoolingArg::PoolThenProject => PoolingOrder::PoolThenProject,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat `key = value` file of flag defaults; flags on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest (JSON) of the training split.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub text_bank: PathBuf,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// JSON-lines training log [default: <out-checkpoint>.log.jsonl]
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Initial learning rate of the cosine schedule.
    #[arg(long, default_value_t = 0.002)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Off-diagonal weight inside the MFI loss.
    #[arg(long, default_value_t = 0.2)]
    pub lambda: f64,
    /// Weight of the MFI loss in the total objective.
    #[arg(long, default_value = "7e-5")]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma_pos: f64,
    #[arg(long, default_value_t = 2.0)]
    pub gamma_neg: f64,
    /// Probability shift for negatives.
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long, default_value_t = 5.0)]
    pub logit_scale: f64,
    #[arg(long, value_enum, default_value_t = GramAxisArg::Classes)]
    pub gram_axis: GramAxisArg,
    /// Batch-standardize projected text before the Gram (features axis only).
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub bn_before_gram: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 384)]
    pub hidden: usize,
    #[arg(long, default_value_t = 256)]
    pub d_prime: usize,
    /// Heavy-ball momentum; 0 is plain SGD.
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    #[arg(long, value_enum, default_value_t = PoolingArg::ProjectThenPool)]
    pub pooling: PoolingArg,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub shuffle: bool,
}

#[derive(Debug, Args)]
pub struct EvalMlrArgs {
    /// Flat `key = value` file of flag defaults; flags on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest (JSON) of the split to evaluate.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub text_bank: PathBuf,
    /// JSON report; a CSV with the same stem is written beside it.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    pub logit_scale: f64,
    #[arg(long, value_enum, default_value_t = PoolingArg::ProjectThenPool)]
    pub pooling: PoolingArg,
    /// Probability above which a class counts as predicted.
    #[arg(long, default_value_t = 0.5)]
    pub precision_threshold: f64,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Flat `key = value` file of flag defaults; flags on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// DCF1 feature shard.
    #[arg(long)]
    pub shard: PathBuf,
    #[arg(long)]
    pub text_bank: PathBuf,
    /// Pixels whose best class probability falls below this are background.
    #[arg(long, default_value_t = 0.85)]
    pub bg_threshold: f64,
    /// Temperature applied to patch-text cosines before the class softmax.
    #[arg(long, default_value_t = 100.0)]
    pub softmax_scale: f64,
    /// Mask size as HxW [default: the feature grid size]
    #[arg(long, value_parser = parse_size)]
    pub out_size: Option<(usize, usize)>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeMfiArgs {
    /// Flat `key = value` file of flag defaults; flags on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub text_bank: PathBuf,
    /// Projector checkpoint; without it only raw features are analyzed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Summary CSV; similarity matrices and histograms are written beside it.
    #[arg(long)]
    pub csv: PathBuf,
    /// Histogram bins over [-1, 1].
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
}
