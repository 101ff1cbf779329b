use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "noiseprior", version, about = "Noise-prior estimation and prior-conditioned denoising")]
pub struct Cli {
    /// TOML config file; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Random seed shared by every stochastic step
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Maximum worker threads
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Add synthetic noise to a clean image and write a ground-truth sidecar
    Synth(SynthArgs),
    /// Estimate the noise prior of a single noisy image
    Estimate(EstimateArgs),
    /// Train the learnable prior estimator on synthetic scenes
    TrainPriorNet(TrainPriorNetArgs),
    /// Train a micro-Condformer denoiser on synthetic scenes
    TrainDenoiser(TrainDenoiserArgs),
    /// Denoise an image with a trained checkpoint
    Denoise(DenoiseArgs),
    /// PSNR between a prediction and its reference
    Eval(EvalArgs),
    /// Run one of the scripted experiments
    Ablation(AblationArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Float,
    #[value(name = "8")]
    Eight,
    #[value(name = "16")]
    Sixteen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Gaussian,
    PoissonGaussian,
    ExactPoissonGaussian,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("level").args(["prior", "sigma_s", "random_prior"]).multiple(false)))]
pub struct SynthArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    /// Prior as `sigma_s,sigma_r` in [0,1] units
    #[arg(long, value_parser = parse_prior)]
    pub prior: Option<(f64, f64)>,
    #[arg(long)]
    pub sigma_s: Option<f64>,
    #[arg(long, conflicts_with_all = ["sigma_r_255", "prior", "random_prior"])]
    pub sigma_r: Option<f64>,
    /// Read-noise level on the 8-bit scale (divided by 255)
    #[arg(long, conflicts_with_all = ["prior", "random_prior"])]
    pub sigma_r_255: Option<f64>,
    /// Draw sigma_s in [0,0.3] and sigma_r in [0,50/255] from the seed
    #[arg(long)]
    pub random_prior: bool,
    #[arg(long, value_enum)]
    pub kind: Option<Kind>,
    /// Clip the noisy image to [0,1]
    #[arg(long)]
    pub clip: bool,
    #[arg(long, value_enum, default_value = "float")]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BayerMode {
    None,
    Split4,
}

#[derive(Args, Debug, Clone, Default)]
pub struct LonpeFlags {
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub select_ratio: Option<f64>,
    /// Select patches at random instead of by smoothness
    #[arg(long)]
    pub no_smoothness_filter: bool,
    #[arg(long)]
    pub min_patches: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[command(flatten)]
    pub lonpe: LonpeFlags,
    #[arg(long, value_enum, default_value = "none")]
    pub bayer: BayerMode,
    /// 2x2 phase of the mosaic for split4
    #[arg(long, default_value = "rggb")]
    pub phase: String,
    /// Normalize integer samples by 2^bits instead of the container maximum
    #[arg(long)]
    pub bit_depth: Option<u32>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataFlags {
    /// Number of procedural training scenes
    #[arg(long)]
    pub images: Option<usize>,
    /// Side length of each training scene
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainPriorNetArgs {
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[command(flatten)]
    pub data: DataFlags,
    /// Write the per-step loss curve as a JSON array
    #[arg(long)]
    pub losses: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Latent {
    Condsa,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PriorModeArg {
    True,
    Zero,
}

#[derive(Args, Debug)]
pub struct TrainDenoiserArgs {
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub latent_blocks: Option<usize>,
    /// Embedding repeat length
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub latent: Option<Latent>,
    #[arg(long, value_enum)]
    pub prior_mode: Option<PriorModeArg>,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long)]
    pub losses: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("prior_source").args(["prior", "prior_from_estimate", "prior_from_net"]).required(true)))]
pub struct DenoiseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, value_parser = parse_prior)]
    pub prior: Option<(f64, f64)>,
    /// Estimate the prior from the input with pooled LoNPE
    #[arg(long)]
    pub prior_from_estimate: bool,
    /// Predict the prior with a trained prior-net checkpoint
    #[arg(long)]
    pub prior_from_net: Option<PathBuf>,
    #[command(flatten)]
    pub lonpe: LonpeFlags,
    #[arg(long, value_enum, default_value = "float")]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    /// Estimation accuracy at three noise levels
    Sweep,
    /// Patch size, ratio and smoothness-filter arms
    Lonpe,
    /// Plain vs zero-prior vs true-prior denoisers
    Conditional,
}

#[derive(Args, Debug)]
pub struct AblationArgs {
    #[arg(value_enum)]
    pub experiment: Experiment,
    #[command(flatten)]
    pub data: DataFlags,
    /// Training steps per arm (conditional only)
    #[arg(long)]
    pub steps: Option<usize>,
    /// Also write the per-item records as CSV
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn parse_prior(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `sigma_s,sigma_r`, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(a)?, p(b)?))
}
