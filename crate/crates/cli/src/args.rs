use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spikesplit_core::planner::{Objective, DEFAULT_MAX_DROP};
use spikesplit_core::FeatureShape;

#[derive(Debug, Parser)]
#[command(name = "spikesplit", version, about = "Split computing with spiking neural networks")]
pub struct Cli {
    /// Output format for tables.
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Transmitted bytes and compression ratio of every bottleneck configuration.
    CompressReport(CompressArgs),
    /// Edge energy of the spiking prefix against a MAC-based baseline.
    EnergyReport(EnergyArgs),
    /// Choose a bottleneck per split point and a global split under an accuracy budget.
    Plan(PlanArgs),
    /// Run the server half of a split network.
    Serve(ServeArgs),
    /// Run the edge half and compare against monolithic inference.
    Infer(InferArgs),
    /// Two-step training on the synthetic toy task.
    TrainToy(TrainToyArgs),
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    /// Built-in architecture name or path to an architecture file.
    #[arg(long)]
    pub arch: String,
    #[arg(long, default_value_t = 2)]
    pub timesteps: usize,
    /// Bottleneck configurations (CSV with split_point, original, compressed);
    /// defaults to the published configurations of the architecture.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    #[arg(long)]
    pub arch: String,
    /// Firing rates per split point (CSV with split_point, firing_rate and an
    /// optional gflops column).
    #[arg(long, conflicts_with = "measure")]
    pub fr_file: Option<PathBuf>,
    /// Measure firing rates on a randomly initialized, calibrated network.
    #[arg(long)]
    pub measure: bool,
    /// Hardware profiles to price (repeatable); all when omitted.
    #[arg(long)]
    pub profile: Vec<String>,
    /// Profile definitions replacing the built-in ones.
    #[arg(long)]
    pub profiles_file: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub timesteps: usize,
    /// Seed for weights and images when measuring.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Images per measurement batch.
    #[arg(long, default_value_t = 2)]
    pub images: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub arch: String,
    /// Candidate configurations; defaults to the published rows priced with
    /// the published firing rates.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Accuracy-drop budget in percentage points.
    #[arg(long, default_value_t = DEFAULT_MAX_DROP)]
    pub max_drop: f64,
    #[arg(long, default_value = "max_ratio", value_parser = parse_objective)]
    pub objective: Objective,
    /// Profile pricing the edge energy of the published rows.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Network selection shared by `serve` and `infer`; both sides must agree.
#[derive(Debug, Clone, Args)]
pub struct NetworkArgs {
    #[arg(long)]
    pub arch: String,
    #[arg(long, default_value_t = 2)]
    pub timesteps: usize,
    /// Seed of the random weights and calibration images.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trained weights; replaces random initialization.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Insert a bottleneck at `--split` compressing to this shape (CxHxW).
    #[arg(long, requires = "split", value_parser = parse_shape)]
    pub compressed: Option<FeatureShape>,
    #[arg(long)]
    pub split: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub net: NetworkArgs,
    /// Listen address; falls back to $SPIKESPLIT_ENDPOINT.
    #[arg(long)]
    pub endpoint: Option<String>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub net: NetworkArgs,
    /// Server address; falls back to $SPIKESPLIT_ENDPOINT.
    #[arg(long, conflicts_with = "loopback")]
    pub endpoint: Option<String>,
    /// Start an in-process server on an ephemeral port.
    #[arg(long)]
    pub loopback: bool,
    /// Seed of the input images.
    #[arg(long, default_value_t = 1)]
    pub image_seed: u64,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Initialization seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 7)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 2)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub finetune_epochs: usize,
    #[arg(long, default_value_t = 2)]
    pub split: usize,
    /// Bottleneck output (CxHxW); defaults to the split feature itself.
    #[arg(long, value_parser = parse_shape)]
    pub compressed: Option<FeatureShape>,
    /// Directory receiving checkpoints and metrics.
    #[arg(long, default_value = "toy-run")]
    pub out: PathBuf,
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    s.parse().map_err(|e: spikesplit_core::Error| e.to_string())
}

fn parse_shape(s: &str) -> Result<FeatureShape, String> {
    s.parse().map_err(|e: spikesplit_core::Error| e.to_string())
}
