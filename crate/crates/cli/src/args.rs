use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lgs_core::masklet::DEFAULT_KAPPA;
use lgs_core::query::{thresholds, DEFAULT_ALPHA_CUTOFF, DEFAULT_MIN_PTS};
use lgs_core::synthetic::SegmenterMode;

#[derive(Debug, Parser)]
#[command(
    name = "lgs",
    version,
    about = "Language-embedded Gaussian splats: build, train, query and evaluate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene directory.
    Synth(SynthArgs),
    /// Deduplicate per-frame proposals into masklets (masks/t_XXXX.rid).
    ExtractMasklets(ExtractArgs),
    /// Average region embeddings per masklet into bank.bin.
    BuildBank(BankArgs),
    /// Train the feature codec and encode the bank.
    TrainCodec(CodecArgs),
    /// Assemble per-frame ground-truth feature rasters.
    BuildGt(GtArgs),
    /// Fit per-Gaussian language embeddings.
    TrainLang(TrainArgs),
    /// Two-step open-vocabulary query.
    Query(QueryCmdArgs),
    /// Per-query 2D and 3D metrics (eval.csv, eval_3d.csv).
    Eval(EvalArgs),
    /// Compare two-step querying with its baselines (ablation.csv).
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub objects: usize,
    #[arg(long, default_value_t = 50)]
    pub gaussians_per_object: usize,
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Miscalibrate image and text embeddings per class.
    #[arg(long)]
    pub skew: bool,
    /// perfect, oversplit or dropout.
    #[arg(long, default_value = "perfect")]
    pub segmenter: SegmenterMode,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Subdirectory of per-frame proposal rasters.
    #[arg(long, default_value = "proposals")]
    pub proposals: String,
    /// Subdirectory of rasters whose ids define tracks across frames.
    #[arg(long, default_value = "gt")]
    pub tracks: String,
    #[arg(long, default_value_t = DEFAULT_KAPPA)]
    pub kappa: f64,
    /// Also export every masklet mask as PGM into this directory.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BankArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Precomputed region embeddings (REM1) instead of the synthetic embedder.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CodecArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.0006)]
    pub lr: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GtArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Per-frame proposals embedded independently, without masklets.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0025)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long, default_value_t = thresholds::REPLICA)]
    pub threshold: f64,
    /// Skip the density filter.
    #[arg(long)]
    pub no_dbscan: bool,
    /// Clustering radius; defaults to a multiple of the median neighbour distance.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MIN_PTS)]
    pub min_pts: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA_CUTOFF)]
    pub alpha_cutoff: f64,
}

#[derive(Debug, Args)]
pub struct QueryCmdArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, conflicts_with = "vector")]
    pub text: Option<String>,
    /// Text file with a feature-space query vector (whitespace or comma separated).
    #[arg(long)]
    pub vector: Option<PathBuf>,
    #[command(flatten)]
    pub query: QueryArgs,
    /// Selected Gaussian indices, one per line; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write one PGM mask per frame here.
    #[arg(long)]
    pub mask_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[command(flatten)]
    pub query: QueryArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[command(flatten)]
    pub query: QueryArgs,
}
