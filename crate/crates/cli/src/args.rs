// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "salve", version, about = "Sparse-autoencoder feature discovery and weight editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark bundle and train its linear head.
    Synth(SynthArgs),
    /// Train a sparse autoencoder on a dataset bundle.
    TrainSae(TrainSaeArgs),
    /// Class-conditional latent means and dominant features.
    Analyze(AnalyzeArgs),
    /// Write a bundle whose head is edited along one latent.
    Edit(EditArgs),
    /// Per-class accuracy as a function of edit strength.
    Sweep(SweepArgs),
    /// Per-sample critical suppression strength.
    AlphaCrit(AlphaCritArgs),
    /// Rank-one head edit that suppresses one class on a key sample.
    Rome(RomeArgs),
    /// Activation steering along one latent's decoder direction.
    Steer(SteerArgs),
    /// Saliency heatmap for one latent.
    Gradfam(GradfamArgs),
    /// One JSON document with confusion matrices, curves, thresholds and
    /// the validity distribution.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Split {
    #[default]
    Test,
    Train,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum DirectionArg {
    #[default]
    Suppress,
    Enhance,
}

#[derive(Debug, Args)]
pub struct Input {
    /// Dataset bundle (.salv).
    #[arg(long)]
    pub bundle: PathBuf,
    /// Which split of the bundle to analyse.
    #[arg(long, value_enum, default_value_t)]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct Target {
    /// Target class index.
    #[arg(long = "class")]
    pub class: usize,
    /// SAE latent; defaults to the class's dominant latent.
    #[arg(long)]
    pub feature: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Report {
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output bundle.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainSaeArgs {
    /// Dataset bundle; trains on its train split when present.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Output SAE bundle.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub input: Input,
    #[arg(long)]
    pub sae: PathBuf,
    #[command(flatten)]
    pub report: Report,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub input: Input,
    #[arg(long)]
    pub sae: PathBuf,
    #[command(flatten)]
    pub target: Target,
    #[arg(long, value_enum, default_value_t)]
    pub direction: DirectionArg,
    #[arg(long)]
    pub alpha: f64,
    /// Output bundle with the edited head.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub alpha_max: Option<f64>,
    #[arg(long)]
    pub alpha_step: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: Input,
    #[arg(long)]
    pub sae: PathBuf,
    #[command(flatten)]
    pub target: Target,
    #[arg(long, value_enum, default_value_t)]
    pub direction: DirectionArg,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Comma-separated SAE seeds; retrains one SAE per seed on the bundle
    /// and reports mean and std of the target-class curve.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Epochs for `--seeds` runs; defaults to the `--sae` manifest.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub report: Report,
}

#[derive(Debug, Args)]
pub struct AlphaCritArgs {
    #[command(flatten)]
    pub input: Input,
    #[arg(long)]
    pub sae: PathBuf,
    #[command(flatten)]
    pub target: Target,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Only this sample (row index in the split); exits 3 when it has no
    /// threshold.
    #[arg(long)]
    pub sample: Option<usize>,
    #[command(flatten)]
    pub report: Report,
}

#[derive(Debug, Args)]
pub struct RomeArgs {
    #[command(flatten)]
    pub input: Input,
    #[arg(long = "class")]
    pub class: usize,
    /// Key sample (row index in the split); defaults to the first correctly
    /// classified sample of the class.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Output bundle with the edited head.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SteerArgs {
    #[command(flatten)]
    pub input: Input,
    #[arg(long)]
    pub sae: PathBuf,
    #[command(flatten)]
    pub target: Target,
    /// Steering strength. Without it, sweeps β over the grid instead.
    #[arg(long)]
    pub beta: Option<f64>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub report: Report,
}

#[derive(Debug, Args)]
pub struct GradfamArgs {
    /// Bundle with a K×H×W `feature_maps` entry and optionally
    /// `gradfam_grads` of the same shape.
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub sae: PathBuf,
    #[arg(long)]
    pub feature: usize,
    #[command(flatten)]
    pub report: Report,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub input: Input,
    #[arg(long)]
    pub sae: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Comma-separated SAE seeds for an added robustness section.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Epochs for `--seeds` runs; defaults to the `--sae` manifest.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
}
