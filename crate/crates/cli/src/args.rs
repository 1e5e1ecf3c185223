use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "puyun",
    version,
    about = "Desk-scale weather forecasting: data, training, forecasts, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic advection–diffusion dataset
    GenData(GenDataArgs),
    /// Single-step pre-training
    Train(TrainArgs),
    /// Dynamic-step autoregressive fine-tuning
    Finetune(FinetuneArgs),
    /// Build the Medium model from Short's rollouts past the handoff step
    CascadeFinetune(CascadeArgs),
    /// Roll a model (or the Short→Medium cascade) forward from initial states
    Forecast(ForecastArgs),
    /// Latitude-weighted RMSE / ACC against truth, with baselines
    Evaluate(EvaluateArgs),
    /// Train and score a list of ablation rows
    Ablate(AblateArgs),
    /// Finite-difference gradient suite
    Gradcheck(GradcheckArgs),
}

/// Architecture flags. Without `--arch` the desk model is used; `--arch`
/// takes an ablation row (deltas relative to the first table row). The
/// individual flags override either.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Ablation row, e.g. "768d+(6,6,6,6)@K5+[resize]"
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Blocks per stage, "a,b,c,d"
    #[arg(long)]
    pub blocks: Option<String>,
    /// Large-kernel size K (odd)
    #[arg(long)]
    pub kernel: Option<usize>,
    /// "resize" or "pixelshuffle+resize"
    #[arg(long)]
    pub merge: Option<String>,
    /// "direct" or "decomposed"
    #[arg(long)]
    pub lka_mode: Option<String>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub droppath: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    /// JSON file with any of these options
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Grid as HxW
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seasonal forcing period in steps
    #[arg(long)]
    pub period: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss-trace CSV
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Also write the checkpoint every N iterations
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Largest rollout length M
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// "sequential" or "parallel" worker execution (identical results)
    #[arg(long)]
    pub execution: Option<String>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct CascadeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub short_ckpt: Option<PathBuf>,
    /// Handoff step S
    #[arg(long)]
    pub handoff: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Largest Medium rollout length; defaults to S (= T − S for T = 2S)
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub execution: Option<String>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ForecastArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset holding the initial states
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub medium_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub handoff: Option<usize>,
    /// Initial time index (repeatable)
    #[arg(long = "init-time")]
    #[serde(default)]
    pub init_time: Vec<u64>,
    /// Use every `--stride`-th valid init of this split: train, valid or test
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Forecast file, optionally NAME=PATH (repeatable)
    #[arg(long)]
    #[serde(default)]
    pub forecast: Vec<String>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Climatology period P in steps, averaged over the train split
    #[arg(long)]
    pub climatology: Option<usize>,
    /// Long-format CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Wide RMSE table CSV
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Comma list of persistence, climatology, or "none"
    #[arg(long)]
    pub baselines: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// ";"-separated ablation rows; defaults to the seven table rows
    #[arg(long)]
    pub specs: Option<String>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Divide every row's embedding width by this (desk default 12)
    #[arg(long)]
    pub embed_divisor: Option<usize>,
    /// Divide every row's block counts by this (desk default 6)
    #[arg(long)]
    pub block_divisor: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub lka_mode: Option<String>,
    /// Score every N-th test-split init
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Grid as HxW
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Finite-difference step h
    #[arg(long)]
    pub step: Option<f64>,
    /// Sampled model parameters
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// "init" or "randomized" parameter point
    #[arg(long)]
    pub point: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}
