use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// KV-cache compression toolkit: generate toy models, plan and apply
/// compression, compare decodes, check error bounds.
#[derive(Debug, Parser)]
#[command(name = "kvsvd", version)]
pub struct Cli {
    /// What to print on stdout. Files written under --out are always JSON/CSV.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory. Falls back to $KVSVD_OUT_DIR, then the working directory.
    #[arg(long, env = "KVSVD_OUT_DIR", default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic model container.
    Gen(GenArgs),
    /// Compute a per-layer compression plan for a model.
    Plan(PlanArgs),
    /// Apply a plan and write a compressed container.
    Compress(CompressArgs),
    /// Decode with two models and report per-step divergence.
    DecodeCompare(DecodeCompareArgs),
    /// Compress one layer at a time over a grid of widths and score each cell.
    ProfileLayer(ProfileArgs),
    /// Shallow-block compression against a progressive plan of equal budget.
    ShallowVsDeep(ShallowArgs),
    /// Check truncation error bounds on random matrices, chains or a model.
    VerifyBounds(VerifyArgs),
    /// KV-cache size for a configuration, optionally under a plan.
    Memory(MemoryArgs),
    /// Progressive-plan fidelity over a grid of retained ratios and seeds.
    Sweep(SweepArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Substrate {
    /// Same geometric decay in every layer.
    Uniform,
    /// Decay interpolated from --decay (layer 0) to --deep-decay (last layer).
    Graded,
    /// Preset graded spectrum with a flat leading plateau, the experiment default.
    Experiment,
}

#[derive(Debug, Clone, Args)]
pub struct ModelSpecArgs {
    #[arg(long, default_value = "toy-small")]
    pub preset: String,
    /// Override the preset's layer count.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Disable rotary position embeddings.
    #[arg(long)]
    pub no_rope: bool,
    #[arg(long, value_enum, default_value_t = Substrate::Uniform)]
    pub substrate: Substrate,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_max: f64,
    /// Geometric singular-value decay; with --substrate graded, the layer-0 decay.
    #[arg(long, default_value_t = 0.9)]
    pub decay: f64,
    #[arg(long, default_value_t = 0.95)]
    pub deep_decay: f64,
    /// Leading singular values held at sigma-max.
    #[arg(long, default_value_t = 0)]
    pub plateau: usize,
    /// Permit presets above the desk-scale parameter limit.
    #[arg(long)]
    pub allow_large: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub model: ModelSpecArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Progressive,
    Uniform,
    VarianceFraction,
    OptimalRatio,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = StrategyArg::Progressive)]
    pub strategy: StrategyArg,
    /// Smallest width (progressive) or the common width (uniform).
    #[arg(long, conflicts_with = "target_ratio")]
    pub d_min: Option<usize>,
    /// Largest width; defaults to the full key/value width.
    #[arg(long)]
    pub d_max: Option<usize>,
    /// Solve for the plan with the largest retained ratio not above this.
    #[arg(long)]
    pub target_ratio: Option<f64>,
    /// Layers whose cumulative condition number exceeds this are left uncompressed.
    #[arg(long, default_value_t = f64::INFINITY)]
    pub threshold: f64,
    /// Explained-variance fraction for the variance-fraction strategy.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PromptArgs {
    /// Comma-separated token ids. Without it a seeded random prompt is used.
    #[arg(long, value_delimiter = ',')]
    pub prompt: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub prompt_seed: u64,
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
}

#[derive(Debug, Clone, Args)]
pub struct CacheArgs {
    /// Batch size for the cache accounting.
    #[arg(long, default_value_t = 1)]
    pub batch: u64,
    /// Sequence length for the cache accounting; defaults to the decoded length.
    #[arg(long)]
    pub seq_len: Option<u64>,
    #[arg(long, default_value_t = 8)]
    pub bytes_per_elem: u64,
    /// Count a key/value pair once instead of twice.
    #[arg(long)]
    pub joint: bool,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeCompareArgs {
    /// Reference container (plain or compressed).
    #[arg(long)]
    pub reference: PathBuf,
    /// Candidate container (plain or compressed).
    #[arg(long)]
    pub candidate: PathBuf,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub cache: CacheArgs,
    /// Include the full logit vectors in the JSON report.
    #[arg(long)]
    pub keep_logits: bool,
    /// Record candidate throughput. Makes the report nondeterministic.
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, default_value_t = 1000)]
    pub eval_seed: u64,
    #[arg(long, default_value_t = 4)]
    pub prompts: usize,
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated widths.
    #[arg(long, value_delimiter = ',', required = true)]
    pub widths: Vec<usize>,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ShallowArgs {
    /// Single model to compare. Without it, fresh models are generated per seed.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "toy-deep")]
    pub preset: String,
    /// Number of seeds (0..n) when generating models.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0.125)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    pub layer_ratio: f64,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    /// One random Gaussian matrix, single-layer bound.
    Matrix,
    /// Random activation chain, multi-layer bound.
    Chain,
    /// A model and its compressed version. Advisory only.
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Relu,
    Identity,
    Silu,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Target::Chain)]
    pub target: Target,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 32)]
    pub rows: usize,
    #[arg(long, default_value_t = 16)]
    pub cols: usize,
    /// Truncation rank for the matrix target.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub depth: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    pub activation: ActivationArg,
    /// Comma-separated per-layer ranks overriding the random ones.
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    /// Uncompressed model (model target).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Compressed model (model target).
    #[arg(long)]
    pub compressed: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub prompts: usize,
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct MemoryArgs {
    /// Presets to tabulate; defaults to the full-size llama presets.
    #[arg(long, value_delimiter = ',')]
    pub preset: Vec<String>,
    /// Take the configuration from a container instead.
    #[arg(long, conflicts_with = "preset")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch: u64,
    #[arg(long, default_value_t = 2048)]
    pub seq_len: u64,
    #[arg(long, default_value_t = 2)]
    pub bytes_per_elem: u64,
    /// Count a key/value pair once instead of twice.
    #[arg(long)]
    pub joint: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelSpecArgs,
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.4, 0.6, 0.8, 1.0])]
    pub targets: Vec<f64>,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write into this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
