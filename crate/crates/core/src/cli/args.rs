use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::head::Pooling;
use crate::sam::Order;
use crate::train::{AblationSetting, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "sam", version, about = "Train, ablate and inspect sequential attention classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-validated training run.
    Train(TrainArgs),
    /// Train each ablation setting on the same data and folds.
    Ablate(AblateArgs),
    /// Train the full module across a grid of filter thresholds.
    SweepDelta(SweepArgs),
    /// Export per-token and per-feature weights for one sentence.
    Heatmap(HeatmapArgs),
    /// Re-run the command recorded in a manifest into a new output path.
    Replay(ReplayArgs),
}

#[derive(Clone, Debug, Args)]
pub struct DataArgs {
    /// Tab-separated `label<TAB>text` corpus.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Generated corpus, e.g. `trigger` or `cooccur:n=500,seed=3`.
    #[arg(long, value_name = "SPEC")]
    pub synthetic: Option<String>,
    /// `table` learns an embedding table; `precomputed:PATH` reads labelled
    /// SAMEMB1 vectors, which then serve as the corpus.
    #[arg(long, value_name = "table|precomputed:PATH", default_value = "table")]
    pub emb: String,
}

#[derive(Clone, Debug, Args)]
pub struct ModelArgs {
    /// Embedding width; defaults to 32, or to the vector width of a
    /// precomputed file.
    #[arg(long, value_name = "D")]
    pub dim: Option<usize>,
    #[arg(long = "max-len", value_name = "L", default_value_t = 16)]
    pub max_len: usize,
    #[arg(long, value_name = "mean|max|first", default_value = "mean", value_parser = parse_pool)]
    pub pool: Pooling,
    /// Bottleneck ratio of both attention FFNs.
    #[arg(long, value_name = "R", default_value_t = 4)]
    pub bottleneck: usize,
}

#[derive(Clone, Debug, Args)]
pub struct ModuleArgs {
    /// Filter threshold for the feature map.
    #[arg(long, value_name = "F", value_parser = parse_delta)]
    pub delta: Option<f64>,
    #[arg(long, value_name = "fam-tam|tam-fam", default_value = "fam-tam", value_parser = parse_order)]
    pub order: Order,
    #[arg(long = "no-fam", conflicts_with = "delta")]
    pub no_fam: bool,
    #[arg(long = "no-tam")]
    pub no_tam: bool,
}

#[derive(Clone, Debug, Args)]
pub struct OptimArgs {
    #[arg(long, value_name = "F", default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long = "weight-decay", value_name = "F", default_value_t = TrainConfig::default().weight_decay)]
    pub weight_decay: f64,
    #[arg(long, value_name = "N", default_value_t = TrainConfig::default().max_epochs)]
    pub epochs: usize,
    #[arg(long, value_name = "N", default_value_t = TrainConfig::default().batch_size)]
    pub batch: usize,
    #[arg(long, value_name = "K", default_value_t = TrainConfig::default().folds)]
    pub folds: usize,
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "F", default_value_t = TrainConfig::default().dropout)]
    pub dropout: f64,
    #[arg(long = "lookahead-k", value_name = "N", default_value_t = TrainConfig::default().lookahead_k)]
    pub lookahead_k: usize,
    #[arg(long = "lookahead-alpha", value_name = "F", default_value_t = TrainConfig::default().lookahead_alpha)]
    pub lookahead_alpha: f64,
}

impl OptimArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch,
            max_epochs: self.epochs,
            lookahead_k: self.lookahead_k,
            lookahead_alpha: self.lookahead_alpha,
            seed: self.seed,
            folds: self.folds,
            dropout: self.dropout,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub module: ModuleArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Comma-separated subset of: baseline, -FAM, -TAM, TAM+FAM, delta=0.1, SAM.
    #[arg(long, value_delimiter = ',', value_parser = parse_setting, allow_hyphen_values = true)]
    pub settings: Vec<AblationSetting>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// `start:stop:step` or a comma-separated list.
    #[arg(long, value_name = "START:STOP:STEP", default_value = "0.0:0.8:0.05")]
    pub grid: String,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "STRING", conflicts_with_all = ["data", "index"])]
    pub text: Option<String>,
    #[arg(long, value_name = "PATH", requires = "index")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "N", requires = "data")]
    pub index: Option<usize>,
    /// Output path; `.json` and `.svg` files are written next to each other.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct ReplayArgs {
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

fn parse_delta(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("delta = {v} is out of range: the filter threshold must satisfy 0 <= delta <= 1"));
    }
    Ok(v)
}

fn parse_order(s: &str) -> Result<Order, String> {
    match s {
        "fam-tam" => Ok(Order::FamThenTam),
        "tam-fam" => Ok(Order::TamThenFam),
        _ => Err(format!("unknown order `{s}` (expected fam-tam or tam-fam)")),
    }
}

fn parse_pool(s: &str) -> Result<Pooling, String> {
    s.parse()
}

fn parse_setting(s: &str) -> Result<AblationSetting, String> {
    AblationSetting::from_name(s).ok_or_else(|| {
        let names: Vec<&str> = AblationSetting::ALL.iter().map(|s| s.name()).collect();
        format!("unknown setting `{s}`; valid settings: {}", names.join(", "))
    })
}
