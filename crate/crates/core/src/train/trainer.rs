//! Minibatch training with dual dropout views, validation-driven early
//! stopping, and full-ranking evaluation.

use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{metrics_from_ranks, rank_of, MetricsReport};
use super::optim::Adam;
use crate::data::{Dataset, Sample, Split};
use crate::error::{PlrError, Result};
use crate::model::{ContextBatch, Model};
use crate::objectives::{objective, LossConfig};
use crate::streams;
use crate::tensor::{RngStream, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub eval_ks: Vec<usize>,
    /// Most recent training targets kept per user; 0 keeps all.
    pub per_user_cap: usize,
    /// Drop a user's context items from the candidate list at evaluation.
    pub exclude_seen: bool,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 20,
            patience: 10,
            seed: 0,
            eval_ks: vec![5, 10, 20],
            per_user_cap: 8,
            exclude_seen: false,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PlrError::Config(m));
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size = {} must be at least 2",
                self.batch_size
            ));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate = {} must be positive",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.epsilon <= 0.0 {
            return bad("adam epsilon must be positive".into());
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return bad("eval_ks must list positive cutoffs".into());
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            ks: self.eval_ks.clone(),
            exclude_seen: self.exclude_seen,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub exclude_seen: bool,
    pub batch_size: usize,
    pub keep_ranks: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10, 20],
            exclude_seen: false,
            batch_size: 256,
            keep_ranks: false,
        }
    }
}

/// Target rank for every sample under the inference-phase scores.
/// Chunks run in parallel; results keep sample order.
pub fn rank_samples(
    model: &Model,
    samples: &[Sample],
    exclude_seen: bool,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let chunks: Vec<Result<Vec<usize>>> = samples
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let contexts: Vec<&[usize]> = chunk.iter().map(|s| s.context.as_slice()).collect();
            let scores = model.score_contexts(&contexts)?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut row = scores.row(i).to_vec();
                    if exclude_seen {
                        mask_seen(&mut row, &s.context, s.target);
                    }
                    rank_of(&row, s.target)
                })
                .collect())
        })
        .collect();
    let mut ranks = Vec::with_capacity(samples.len());
    for c in chunks {
        ranks.extend(c?);
    }
    Ok(ranks)
}

/// Removes context items (other than the target itself) from the ranking.
pub fn mask_seen(scores: &mut [f32], context: &[usize], target: usize) {
    for &i in context {
        if i != target {
            scores[i] = f32::NEG_INFINITY;
        }
    }
}

pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let samples = dataset.eval_samples(split)?;
    let ranks = rank_samples(model, &samples, cfg.exclude_seen, cfg.batch_size)?;
    let mut report = metrics_from_ranks(&ranks, &cfg.ks, split)?;
    if cfg.keep_ranks {
        report.ranks = Some(ranks);
    }
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StopDecision {
    pub stop: bool,
    /// 1-based epoch of the best value so far.
    pub best_epoch: usize,
}

/// Stops once `patience` consecutive epochs fail to beat the best value.
/// A tie is not an improvement.
pub fn early_stop(history: &[f64], patience: usize) -> Result<StopDecision> {
    if history.is_empty() {
        return Err(PlrError::Input(
            "early stopping needs at least one epoch".into(),
        ));
    }
    let mut best = 0;
    let mut stale = 0;
    for (i, &v) in history.iter().enumerate().skip(1) {
        if v > history[best] {
            best = i;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    Ok(StopDecision {
        stop: stale >= patience,
        best_epoch: best + 1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub nip: f64,
    pub kl: f64,
    pub rcl: f64,
    pub valid_ndcg10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Loss of the first batch before any update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub steps: u64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,valid_ndcg@10\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{},{}\n",
                r.epoch, r.train_loss, r.valid_ndcg10
            ));
        }
        s
    }
}

/// Trains in place and leaves the best-validation parameters in `model`.
///
/// On a non-finite loss or gradient the parameters from before the last
/// successful update are restored and a `NonFinite` error is returned.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
) -> Result<TrainHistory> {
    tcfg.validate()?;
    lcfg.validate()?;
    model.config.validate()?;
    if model.config.vocab_size != dataset.num_items() {
        return Err(PlrError::Config(format!(
            "model vocabulary {} does not match the dataset's {} items",
            model.config.vocab_size,
            dataset.num_items()
        )));
    }
    let samples = dataset.train_samples(tcfg.per_user_cap)?;
    if samples.len() < 2 {
        return Err(PlrError::Data("fewer than two training samples".into()));
    }
    let root = RngStream::new(tcfg.seed);
    let mut data_rng = root.split(streams::DATA);
    let mut view1 = root.split(streams::DROPOUT_VIEW1);
    let mut view2 = root.split(streams::DROPOUT_VIEW2);
    let mut adam = Adam::new(
        tcfg.learning_rate,
        tcfg.beta1,
        tcfg.beta2,
        tcfg.epsilon,
        tcfg.clip_norm,
    );
    let eval_cfg = EvalConfig {
        ks: vec![10],
        exclude_seen: tcfg.exclude_seen,
        ..Default::default()
    };

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = TrainHistory {
        initial_loss: f64::NAN,
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        steps: 0,
    };
    let mut best_params = model.params.clone();
    let mut last_good = model.params.clone();
    let mut ndcgs = Vec::new();
    for epoch in 1..=tcfg.max_epochs {
        let start = Instant::now();
        data_rng.shuffle(&mut order);
        let (mut sum, mut nip, mut kl, mut rcl, mut batches) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(tcfg.batch_size) {
            // A lone trailing sample has no in-batch negatives.
            if idx.len() < 2 {
                continue;
            }
            let contexts: Vec<&[usize]> =
                idx.iter().map(|&i| samples[i].context.as_slice()).collect();
            let targets: Vec<usize> = idx.iter().map(|&i| samples[i].target).collect();
            let batch =
                ContextBatch::new(&contexts, model.config.max_len, model.config.vocab_size)?;
            let grads = {
                let tape = Tape::new();
                let vars = model.params.to_tape(&tape, true);
                let obj = objective(
                    &vars,
                    &model.config,
                    lcfg,
                    &batch,
                    &targets,
                    Some(&mut view1),
                    Some(&mut view2),
                    Some(&model.counters),
                )?;
                let b = obj.breakdown;
                if !b.total.is_finite() {
                    model.params = last_good;
                    return Err(PlrError::NonFinite(format!(
                        "loss {} at epoch {epoch}, step {}; restored the parameters from before the previous update",
                        b.total,
                        history.steps + 1
                    )));
                }
                if history.initial_loss.is_nan() {
                    history.initial_loss = b.total;
                }
                sum += b.total;
                nip += b.nip;
                kl += b.kl;
                rcl += b.rcl;
                batches += 1;
                tape.backward(obj.total)?;
                vars.grads()
            };
            if grads.iter().any(|g| !g.is_finite()) {
                model.params = last_good;
                return Err(PlrError::NonFinite(format!(
                    "gradient at epoch {epoch}, step {}; restored the parameters from before the previous update",
                    history.steps + 1
                )));
            }
            last_good.clone_from(&model.params);
            adam.update(model.params.flat_mut(), &grads)?;
            history.steps += 1;
        }
        let n = batches.max(1) as f64;
        let valid = evaluate(model, dataset, Split::Valid, &eval_cfg)?.ndcg(10);
        ndcgs.push(valid);
        let record = EpochRecord {
            epoch,
            train_loss: sum / n,
            nip: nip / n,
            kl: kl / n,
            rcl: rcl / n,
            valid_ndcg10: valid,
        };
        info!(
            "epoch {epoch}: loss {:.5} (nip {:.5}, kl {:.5}, rcl {:.5}), valid ndcg@10 {valid:.5}, {:.1}s",
            record.train_loss,
            record.nip,
            record.kl,
            record.rcl,
            start.elapsed().as_secs_f64()
        );
        history.epochs.push(record);
        let decision = early_stop(&ndcgs, tcfg.patience)?;
        if decision.best_epoch == epoch {
            best_params = model.params.clone();
        }
        history.best_epoch = decision.best_epoch;
        if decision.stop {
            debug!(
                "early stop after epoch {epoch}; best epoch {}",
                decision.best_epoch
            );
            history.stopped_early = true;
            break;
        }
    }
    model.params = best_params;
    Ok(history)
}
