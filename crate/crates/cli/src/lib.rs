//! Command implementations behind the `exa` binary.

pub mod commands;
pub mod manifest;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use exa_core::dataset::DatasetConfig;
use exa_core::model::{ModelConfig, TrainConfig};
use exa_tensor::TensorError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "exa", version, about = "Extreme amodal face detection toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Global {
    /// Seed of every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON run configuration with optional `dataset`, `model` and `train` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate procedural scenes and crop samples.
    Synth(SynthArgs),
    /// Train the detector on a synthesized dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a baseline.
    Eval(EvalArgs),
    /// Token and FLOP accounting with measured latency.
    Flops(FlopsArgs),
    /// Finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Crops per scene.
    #[arg(long)]
    pub crops: Option<usize>,
    /// Expansion ratio of the frame around each crop.
    #[arg(long)]
    pub k: Option<u32>,
    #[arg(long)]
    pub input_size: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Retention percentage at every selection.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Decoder scales, coarse to fine, e.g. `2,1`.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<usize>>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Continue from a checkpoint written by `train`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Uniform,
    OracleGt,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate a reference method instead of a model.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Evaluate stored predictions instead of running a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Also write every prediction to `predictions.jsonl`.
    #[arg(long)]
    pub export: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Geometry {
    /// 320-pixel input at stride 16.
    Full,
    /// The configured model.
    Config,
}

#[derive(Clone, Debug, Args)]
pub struct FlopsArgs {
    #[arg(long, value_enum, default_value = "full")]
    pub geometry: Geometry,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<usize>>,
    /// Timed forward passes.
    #[arg(long, default_value_t = 200)]
    pub runs: usize,
}

#[derive(Clone, Debug, Args)]
pub struct GradcheckArgs {
    /// Consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// Flip the sign of one backward rule, by op name.
    #[arg(long)]
    pub inject_sign_flip: Option<String>,
}

/// Everything a run depends on besides its seed and inputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = fs::read_to_string(path).map_err(|e| exa_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| exa_core::Error::Config(format!("{}: {e}", path.display())))
            .context("reading run configuration")
    }
}

/// Raised when a gradient check exceeds its tolerance.
#[derive(Debug)]
pub struct CheckFailed(pub Vec<String>);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed for: {}", self.0.join(", "))
    }
}

impl std::error::Error for CheckFailed {}

/// Documented process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const DIVERGENCE: i32 = 4;
    pub const ID_MISMATCH: i32 = 5;
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<exa_core::Error>() {
            return match e {
                exa_core::Error::Input(_) | exa_core::Error::Config(_) => exit::CONFIG,
                exa_core::Error::Io { .. } | exa_core::Error::Format { .. } => exit::IO,
                exa_core::Error::Divergence { .. } => exit::DIVERGENCE,
                exa_core::Error::IdMismatch(_) => exit::ID_MISMATCH,
                exa_core::Error::Tensor(t) => tensor_code(t),
            };
        }
        if let Some(t) = cause.downcast_ref::<TensorError>() {
            return tensor_code(t);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::IO;
        }
    }
    exit::FAILURE
}

fn tensor_code(t: &TensorError) -> i32 {
    match t {
        TensorError::Io { .. } | TensorError::Checkpoint { .. } => exit::IO,
        TensorError::Config(_) => exit::CONFIG,
        _ => exit::FAILURE,
    }
}
