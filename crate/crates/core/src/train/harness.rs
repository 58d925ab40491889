use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_predictions, EvalReport};
use super::model::{fold_rng, Batch, Dataset, Example, Model, ModelConfig, Split};
use super::optim::{adamw_step, lookahead_sync, AdamState, AdamWConfig};
use crate::backbone::Vocab;
use crate::data::kfold_split;
use crate::error::{Error, Result};
use crate::head::Pooling;
use crate::sam::SamConfig;
use crate::tensor::Tensor;

/// Folds used to carve a single hold-out split when `folds == 1`.
const HOLDOUT_FOLDS: usize = 5;
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// `k >= 2` runs stratified k-fold cross-validation; `1` trains once on
    /// a stratified 80/20 split.
    pub folds: usize,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 1e-2,
            batch_size: 32,
            max_epochs: 50,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            folds: 5,
            dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.lookahead_k == 0 || self.folds == 0 {
            return bad("batch_size, max_epochs, lookahead_k and folds must be positive");
        }
        if !(0.0..=1.0).contains(&self.lookahead_alpha) {
            return bad("lookahead_alpha must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: EvalReport,
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Best-epoch parameters.
    pub model: Option<Model>,
    pub vocab: Option<Vocab>,
    /// Largest filtered feature weight the best model assigns on the dev split.
    pub max_feature_weight: Option<f64>,
    pub failure: Option<FoldFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub epoch: usize,
    pub numeric: bool,
    pub message: String,
}

impl FoldResult {
    pub fn best(&self) -> Option<&EvalReport> {
        let epoch = self.best_epoch?;
        self.history.iter().find(|r| r.epoch == epoch).map(|r| &r.dev)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub binary_f1: Option<f64>,
    pub seconds_per_epoch: f64,
    pub completed_folds: usize,
    pub failed_folds: usize,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub folds: Vec<FoldResult>,
    pub warnings: Vec<String>,
}

impl RunResult {
    /// Means over completed folds of their best-epoch dev metrics; `None`
    /// when every fold failed.
    pub fn summary(&self) -> Option<RunSummary> {
        let done: Vec<&EvalReport> = self.folds.iter().filter(|f| f.failure.is_none()).filter_map(|f| f.best()).collect();
        if done.is_empty() {
            return None;
        }
        let n = done.len() as f64;
        let epochs: Vec<f64> = self
            .folds
            .iter()
            .flat_map(|f| f.history.iter().map(|r| r.dev.wall_seconds))
            .collect();
        Some(RunSummary {
            accuracy: done.iter().map(|r| r.accuracy).sum::<f64>() / n,
            macro_f1: done.iter().map(|r| r.macro_f1).sum::<f64>() / n,
            binary_f1: done
                .iter()
                .map(|r| r.binary_f1)
                .sum::<Option<f64>>()
                .map(|s| s / n),
            seconds_per_epoch: epochs.iter().sum::<f64>() / epochs.len().max(1) as f64,
            completed_folds: done.len(),
            failed_folds: self.folds.len() - done.len(),
        })
    }

    /// Fold with the best selection metric (lowest index on ties).
    pub fn best_fold(&self) -> Option<&FoldResult> {
        self.folds
            .iter()
            .filter(|f| f.failure.is_none() && f.model.is_some())
            .fold(None, |best: Option<&FoldResult>, f| match best {
                Some(b) if b.best().map(EvalReport::selection_metric) >= f.best().map(EvalReport::selection_metric) => Some(b),
                _ => Some(f),
            })
    }
}

/// Predicts `examples` in eval mode and scores them.
pub fn evaluate(model: &Model, examples: &[Example], positive: usize) -> Result<EvalReport> {
    let (preds, _) = predict_all(model, examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    Ok(evaluate_predictions(&preds, &labels, model.config.num_classes, positive))
}

/// Predictions plus the largest filtered feature weight seen.
fn predict_all(model: &Model, examples: &[Example]) -> Result<(Vec<usize>, f64)> {
    let mut preds = Vec::with_capacity(examples.len());
    let mut max_fam: f64 = 0.0;
    for chunk in examples.chunks(EVAL_BATCH) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::from_examples(&refs, model.config.sam.max_len, model.input_dim())?;
        let (_, p, trace) = model.predict(&batch)?;
        if let Some(m) = &trace.fam_map {
            max_fam = m.data().iter().copied().fold(max_fam, f64::max);
        }
        preds.extend(p);
    }
    Ok((preds, max_fam))
}

/// Trains one model on `split.train`, scoring `split.dev` after every epoch,
/// and keeps the parameters of the best-scoring epoch.
pub fn train_fold(split: &Split, model_cfg: &ModelConfig, cfg: &TrainConfig, fold: usize, positive: usize) -> FoldResult {
    let mut result = FoldResult {
        fold,
        history: Vec::new(),
        best_epoch: None,
        model: None,
        vocab: split.vocab.clone(),
        max_feature_weight: None,
        failure: None,
    };
    let fail = |result: &mut FoldResult, epoch: usize, e: Error| {
        result.failure = Some(FoldFailure {
            epoch,
            numeric: matches!(e, Error::NonFinite { .. } | Error::NonFiniteGradient { .. }),
            message: e.to_string(),
        });
    };
    let mut rng = fold_rng(cfg.seed, fold as u64);
    let mut model = match Model::init(model_cfg.clone(), split.vocab.as_ref().map(Vocab::len), &mut rng) {
        Ok(m) => m,
        Err(e) => {
            fail(&mut result, 0, e);
            return result;
        }
    };
    if split.train.is_empty() || split.dev.is_empty() {
        fail(&mut result, 0, Error::Data("empty train or dev split".into()));
        return result;
    }
    let adamw = cfg.adamw();
    let mut state = AdamState::new();
    let mut slow: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
    let mut steps: u64 = 0;
    let mut best_metric = f64::NEG_INFINITY;
    let (max_len, dim) = (model_cfg.sam.max_len, model_cfg.sam.d_model);
    let mut order: Vec<usize> = (0..split.train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let step = (|| -> Result<()> {
            for chunk in order.chunks(cfg.batch_size) {
                let refs: Vec<&Example> = chunk.iter().map(|&i| &split.train[i]).collect();
                let batch = Batch::from_examples(&refs, max_len, dim)?;
                let (loss, grads) = model.loss_and_grads(&batch, Some((cfg.dropout, &mut rng)))?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite { op: "loss" });
                }
                loss_sum += loss * chunk.len() as f64;
                adamw_step(&mut model.params_mut(), &grads, &mut state, &adamw)?;
                model.rezero_pad();
                steps += 1;
                let mut fast: Vec<&mut Tensor> = model.params_mut().into_iter().map(|(_, t)| t).collect();
                lookahead_sync(&mut fast, &mut slow, cfg.lookahead_k, cfg.lookahead_alpha, steps);
            }
            Ok(())
        })();
        if let Err(e) = step {
            fail(&mut result, epoch, e);
            return result;
        }
        let train_seconds = start.elapsed().as_secs_f64();
        let mut dev = match evaluate(&model, &split.dev, positive) {
            Ok(r) => r,
            Err(e) => {
                fail(&mut result, epoch, e);
                return result;
            }
        };
        dev.wall_seconds = train_seconds;
        if dev.selection_metric() > best_metric {
            best_metric = dev.selection_metric();
            result.best_epoch = Some(epoch);
            result.model = Some(model.clone());
        }
        result.history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / split.train.len() as f64,
            dev,
        });
    }
    if let Some(best) = &result.model {
        match predict_all(best, &split.dev) {
            Ok((_, m)) => result.max_feature_weight = Some(m),
            Err(e) => fail(&mut result, cfg.max_epochs, e),
        }
    }
    result
}

/// Cross-validated training run. Folds are independent and may run in
/// parallel; results come back in fold order.
pub fn train_run(dataset: &Dataset, sam: &SamConfig, pooling: Pooling, cfg: &TrainConfig) -> Result<RunResult> {
    cfg.validate()?;
    sam.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if dataset.num_classes() < 2 {
        return Err(Error::Data(format!("need at least 2 classes, found {}", dataset.num_classes())));
    }
    if let Some(dim) = dataset.vector_dim() {
        if dim != sam.d_model {
            return Err(Error::Config(format!(
                "precomputed vectors have width {dim} but d_model is {}",
                sam.d_model
            )));
        }
    }
    let model_cfg = ModelConfig {
        sam: sam.clone(),
        pooling,
        num_classes: dataset.num_classes(),
    };
    let labels = dataset.labels();
    let (assignment, folds): (_, Vec<usize>) = if cfg.folds == 1 {
        (kfold_split(&labels, HOLDOUT_FOLDS.min(labels.len()), cfg.seed)?, vec![0])
    } else {
        (kfold_split(&labels, cfg.folds, cfg.seed)?, (0..cfg.folds).collect())
    };
    let positive = dataset.positive_class();
    let results = folds
        .par_iter()
        .map(|&fold| {
            let (train, dev) = assignment.split(fold);
            let split = dataset.encode(&train, &dev, sam.max_len);
            train_fold(&split, &model_cfg, cfg, fold, positive)
        })
        .collect();
    Ok(RunResult {
        folds: results,
        warnings: assignment.warnings,
    })
}
