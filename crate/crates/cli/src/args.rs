use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use grc_core::grc::{GrcConfig, Mode};
use grc_core::pipeline::{Dtype, Partition};
use grc_core::oracle::Regime;
use grc_core::training::TrainConfig;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "grc",
    version,
    about = "Synthetic river data, graph-recurrent forecasting models and their evaluation",
    after_help = "Every command accepts --config FILE with `key = value` lines naming long flags; \
                  flags given on the command line win."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random river network, or refine an existing one
    #[command(args_override_self = true)]
    GenNetwork(GenNetworkArgs),
    /// Simulate a dataset with the routing oracle
    #[command(args_override_self = true)]
    GenData(GenDataArgs),
    /// Train a model on every reach and variable of a dataset
    #[command(args_override_self = true)]
    Pretrain(PretrainArgs),
    /// Train and evaluate all eight component subsets
    #[command(args_override_self = true)]
    Ablate(AblateArgs),
    /// Fine-tune a checkpoint on discharge at a subset of gauges
    #[command(args_override_self = true)]
    Finetune(FinetuneArgs),
    /// Fine-tune over nested supervision ratios
    #[command(args_override_self = true)]
    Sweep(SweepArgs),
    /// Score a checkpoint on a dataset partition
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Collect eval.json files under a run directory into summary.json
    #[command(args_override_self = true)]
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Random seed
    #[arg(long, env = "GRC_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for parallel training micro-batches
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Replace artifacts in a non-empty output directory
    #[arg(long)]
    pub overwrite: bool,
    /// File of `key = value` flag defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value = "coldstart")]
    pub mode: Mode,
    /// Lag window length [default: 20 coldstart, 7 hotstart]
    #[arg(long)]
    pub h_lag: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub f_horizon: usize,
    #[arg(long, default_value_t = 128)]
    pub d_fusion: usize,
    #[arg(long, default_value_t = 64)]
    pub d_hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub gcn_layers: usize,
}

impl ModelArgs {
    pub fn config(&self) -> GrcConfig {
        GrcConfig {
            h_lag: self.h_lag.unwrap_or(self.mode.default_lag()),
            f_horizon: self.f_horizon,
            d_fusion: self.d_fusion,
            d_hidden: self.d_hidden,
            n_gcn_layers: self.gcn_layers,
            ..GrcConfig::new(self.mode)
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    /// Windows per optimizer step
    #[arg(long, default_value_t = TrainConfig::default().batch)]
    pub batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().plateau_factor)]
    pub plateau_factor: f64,
    #[arg(long, default_value_t = TrainConfig::default().plateau_patience)]
    pub plateau_patience: usize,
    #[arg(long, default_value_t = TrainConfig::default().early_stop_patience)]
    pub early_stop: usize,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    pub weight_decay: f64,
    /// Spacing of training window anchors
    #[arg(long, default_value_t = TrainConfig::default().stride)]
    pub stride: usize,
    #[arg(long, default_value_t = TrainConfig::default().val_stride)]
    pub val_stride: usize,
    /// Cap on training windows drawn per epoch
    #[arg(long)]
    pub windows_per_epoch: Option<usize>,
    /// Windows stacked into one graph per forward pass
    #[arg(long, default_value_t = TrainConfig::default().micro_batch)]
    pub micro_batch: usize,
}

impl TrainArgs {
    pub fn config(&self, common: &Common) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            early_stop_patience: self.early_stop,
            weight_decay: self.weight_decay,
            seed: common.seed,
            stride: self.stride,
            val_stride: self.val_stride,
            windows_per_epoch: self.windows_per_epoch,
            micro_batch: self.micro_batch,
            workers: common.workers,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalOpts {
    /// Spacing of evaluation window anchors
    #[arg(long, default_value_t = 1)]
    pub eval_stride: usize,
    /// Windows per forward pass during evaluation
    #[arg(long, default_value_t = 8)]
    pub chunk: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenNetworkArgs {
    #[arg(long, default_value_t = 200)]
    pub reaches: usize,
    /// Probability that a new reach opens a tributary
    #[arg(long, default_value_t = 0.3)]
    pub branching: f64,
    /// Refine instead of generating: directory or graph.json to read
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Subdivide every reach into k pieces
    #[arg(long)]
    pub refine: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 200)]
    pub reaches: usize,
    #[arg(long, default_value_t = 0.3)]
    pub branching: f64,
    /// Kept steps after spin-up
    #[arg(long, default_value_t = 2800)]
    pub steps: usize,
    /// Discarded warm-up steps
    #[arg(long, default_value_t = 365)]
    pub spinup: usize,
    #[arg(long, default_value = "humid")]
    pub regime: Regime,
    /// Training steps [default: steps − 2·⌊steps/7⌋]
    #[arg(long)]
    pub train: Option<usize>,
    /// Validation steps [default: ⌊steps/7⌋]
    #[arg(long)]
    pub val: Option<usize>,
    /// Test steps [default: ⌊steps/7⌋]
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long, default_value = "f32")]
    pub dtype: Dtype,
    /// Route on this network (directory or graph.json) instead of a new one
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Re-route the dataset in this directory under the given physics,
    /// keeping its forcing, split and normalization (observations)
    #[arg(long)]
    pub perturb: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub manning_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub runoff_bias: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Enabled components, e.g. `stat+temp+topo`, `temp`, `mlp`
    #[arg(long, default_value = "stat+temp+topo")]
    pub components: String,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub eval: EvalOpts,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GaugeArgs {
    /// Explicit supervised gauges, comma-separated reach ids
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["candidates", "ratio"])]
    pub gauges: Option<Vec<usize>>,
    /// Number of candidate gauges drawn from the network
    #[arg(long, default_value_t = 40)]
    pub candidates: usize,
    /// Supervised fraction of the candidates
    #[arg(long, default_value_t = 0.5)]
    pub ratio: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Observation dataset directory
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub gauges: GaugeArgs,
    /// Learning rate of the tuned layers (scaled per layer)
    #[arg(long, default_value_t = 1e-3)]
    pub base_lr: f64,
    /// Train every layer from a fresh initialization instead
    #[arg(long)]
    pub scratch: bool,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub eval: EvalOpts,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub candidates: usize,
    /// Ascending supervision ratios
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,0.75,0.9,1.0")]
    pub ratios: Vec<f64>,
    /// Also train a fresh full model on each gauge subset
    #[arg(long)]
    pub scratch: bool,
    #[arg(long, default_value_t = 1e-3)]
    pub base_lr: f64,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub eval: EvalOpts,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_partition)]
    pub partition: Partition,
    /// Experiment id [default: checkpoint directory name]
    #[arg(long)]
    pub name: Option<String>,
    /// Also compute the spin-up curve up to this many steps (coldstart)
    #[arg(long)]
    pub spinup_max: Option<usize>,
    #[command(flatten)]
    pub eval: EvalOpts,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// Directory searched recursively for eval.json
    #[arg(long)]
    pub run: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

fn parse_partition(s: &str) -> Result<Partition, String> {
    match s {
        "train" => Ok(Partition::Train),
        "val" => Ok(Partition::Val),
        "test" => Ok(Partition::Test),
        other => Err(format!("unknown partition {other:?} (train, val, test)")),
    }
}
