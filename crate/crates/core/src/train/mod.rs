//! Training loop, metrics, optimizers and the ablation/sweep drivers.

mod experiments;
mod harness;
mod metrics;
mod model;
mod optim;

pub use experiments::{
    ablation_suite, default_delta_grid, delta_grid, delta_sweep, parse_delta_grid, AblationRow, AblationSetting, SweepPoint,
};
pub use harness::{evaluate, train_fold, train_run, EpochRecord, FoldFailure, FoldResult, RunResult, RunSummary, TrainConfig};
pub use metrics::{evaluate_predictions, ClassStats, EvalReport};
pub use model::{fold_rng, Batch, BatchInput, Dataset, Example, Features, Forward, Model, ModelConfig, Split};
pub use optim::{adamw_step, lookahead_sync, AdamState, AdamWConfig};
