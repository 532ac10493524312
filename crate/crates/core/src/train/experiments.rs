//! Harnesses over train and evaluate: ablations, grid sweeps, the
//! per-user oracle ceiling, robustness to missing history, and stream
//! diversity of a trained model.

use std::str::FromStr;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::metrics::{metrics_from_ranks, rank_of, CutoffMetrics, MetricsReport};
use super::trainer::{evaluate, mask_seen, train, EvalConfig, TrainConfig, TrainHistory};
use crate::data::{perturb_missing, Dataset, Sample, Split};
use crate::error::{PlrError, Result};
use crate::model::{run_batch, ContextBatch, Mode, Model, Phase, PlrConfig};
use crate::objectives::LossConfig;
use crate::tensor::Tape;
use crate::theory::representational_diversity;

/// Builds a fresh model from `config` seeded by `tcfg.seed`, trains it,
/// and evaluates on the test split.
pub fn train_and_evaluate(
    config: &PlrConfig,
    dataset: &Dataset,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
) -> Result<(Model, TrainHistory, MetricsReport)> {
    let mut model = Model::new(config.clone(), tcfg.seed)?;
    let history = train(&mut model, dataset, tcfg, lcfg)?;
    let report = evaluate(&model, dataset, Split::Test, &tcfg.eval_config())?;
    Ok((model, history, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    NoMors,
    NoRcl,
    NoKl,
}

impl FromStr for Ablation {
    type Err = PlrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-mors" => Ok(Self::NoMors),
            "no-rcl" => Ok(Self::NoRcl),
            "no-kl" => Ok(Self::NoKl),
            _ => Err(PlrError::Input(format!(
                "unknown ablation `{s}` (expected no-mors, no-rcl or no-kl)"
            ))),
        }
    }
}

/// The same configuration with one mechanism switched off. Without the
/// gate, streams are averaged with weight 1/M.
pub fn ablate(base: &PlrConfig, variant: Ablation) -> PlrConfig {
    let mut cfg = base.clone();
    match variant {
        Ablation::NoMors => cfg.mors_enabled = false,
        Ablation::NoRcl => cfg.rcl_enabled = false,
        Ablation::NoKl => cfg.kl_enabled = false,
    }
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub streams: Vec<usize>,
    pub steps: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// Applied to both representation and attention dropout.
    pub dropouts: Vec<f64>,
}

impl SweepGrid {
    pub fn cells(&self) -> usize {
        self.streams.len() * self.steps.len() * self.lambdas.len() * self.dropouts.len()
    }

    /// Streams and steps in 1..=5, λ in [0, 1], dropout in [0, 0.6].
    pub fn validate(&self) -> Result<()> {
        if self.cells() == 0 {
            return Err(PlrError::Config(
                "every sweep axis needs at least one value".into(),
            ));
        }
        if let Some(v) = self
            .streams
            .iter()
            .chain(&self.steps)
            .find(|v| !(1..=5).contains(*v))
        {
            return Err(PlrError::Config(format!(
                "stream/step count {v} outside 1..=5"
            )));
        }
        if let Some(v) = self.lambdas.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PlrError::Config(format!("lambda {v} outside [0, 1]")));
        }
        if let Some(v) = self.dropouts.iter().find(|v| !(0.0..=0.6).contains(*v)) {
            return Err(PlrError::Config(format!("dropout {v} outside [0, 0.6]")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub streams: usize,
    pub steps: usize,
    pub lambda: f64,
    pub dropout: f64,
    pub best_epoch: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub cells_total: usize,
    /// False when the budget ran out before every cell was trained.
    pub complete: bool,
}

impl SweepTable {
    pub fn table(&self, k: usize) -> String {
        let mut s = format!(
            "{:>3} {:>3} {:>8} {:>8} {:>10} {:>10}\n",
            "M",
            "T",
            "lambda",
            "dropout",
            format!("R@{k}"),
            format!("N@{k}")
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:>3} {:>3} {:>8} {:>8} {:>10.6} {:>10.6}\n",
                r.streams,
                r.steps,
                r.lambda,
                r.dropout,
                r.metrics.recall(k),
                r.metrics.ndcg(k)
            ));
        }
        s
    }
}

/// Trains and evaluates every cell on the same split with the same seeds.
/// The budget is checked before each cell starts.
pub fn sweep(
    base: &PlrConfig,
    grid: &SweepGrid,
    dataset: &Dataset,
    tcfg: &TrainConfig,
    temperature: f64,
    kl_sign: f64,
    budget: Option<Duration>,
) -> Result<SweepTable> {
    grid.validate()?;
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut complete = true;
    'cells: for &m in &grid.streams {
        for &t in &grid.steps {
            for &lambda in &grid.lambdas {
                for &dropout in &grid.dropouts {
                    if budget.is_some_and(|b| start.elapsed() > b) {
                        warn!(
                            "sweep budget exhausted after {} of {} cells",
                            rows.len(),
                            grid.cells()
                        );
                        complete = false;
                        break 'cells;
                    }
                    let cfg = PlrConfig {
                        streams: m,
                        steps: t,
                        dropout_rep: dropout,
                        dropout_attn: dropout,
                        ..base.clone()
                    };
                    let lcfg = LossConfig::for_model(&cfg, lambda, temperature, kl_sign);
                    let (_, history, metrics) = train_and_evaluate(&cfg, dataset, tcfg, &lcfg)?;
                    info!("sweep cell M={m} T={t} lambda={lambda} dropout={dropout} done");
                    rows.push(SweepRow {
                        streams: m,
                        steps: t,
                        lambda,
                        dropout,
                        best_epoch: history.best_epoch,
                        metrics,
                    });
                }
            }
        }
    }
    Ok(SweepTable {
        rows,
        cells_total: grid.cells(),
        complete,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeilingReport {
    pub current: MetricsReport,
    pub ceiling: MetricsReport,
    /// `ceiling − current` per cutoff.
    pub gap: Vec<CutoffMetrics>,
    /// How often each candidate gave the best rank: index 0 is the
    /// aggregated output, then `1 + (t − 1)·M + m`. Ties go to the earlier
    /// candidate.
    pub best_candidate_counts: Vec<usize>,
}

/// Per-user best rank over every reasoning state and the aggregated
/// output, against the aggregated output alone.
pub fn oracle_ceiling(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    cfg: &EvalConfig,
) -> Result<CeilingReport> {
    let start = Instant::now();
    let samples = dataset.eval_samples(split)?;
    let (m, t_max) = (model.config.streams, model.config.steps);
    let mut current = Vec::with_capacity(samples.len());
    let mut best = Vec::with_capacity(samples.len());
    let mut counts = vec![0; 1 + m * t_max];
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let tape = Tape::new();
        let p = model.params.to_tape(&tape, false);
        let contexts: Vec<&[usize]> = chunk.iter().map(|s| s.context.as_slice()).collect();
        let batch = ContextBatch::new(&contexts, model.config.max_len, model.config.vocab_size)?;
        let out = run_batch(
            &p,
            &model.config,
            &batch,
            &mut Mode::Eval,
            Phase::Infer,
            None,
        )?;
        let aggregated = out.logits.value();
        let per_step = out
            .grid
            .states
            .iter()
            .map(|h| Ok(h.matmul_bt(p.item_embeddings)?.value()))
            .collect::<Result<Vec<_>>>()?;
        for (b, s) in chunk.iter().enumerate() {
            let rank = |row: &[f32]| rank_with(row, s, cfg.exclude_seen);
            let r0 = rank(aggregated.row(b));
            let (mut r_best, mut which) = (r0, 0);
            for t in 0..t_max {
                for stream in 0..m {
                    let r = rank(per_step[t].row(b * m + stream));
                    if r < r_best {
                        r_best = r;
                        which = 1 + t * m + stream;
                    }
                }
            }
            current.push(r0);
            best.push(r_best);
            counts[which] += 1;
        }
    }
    let mut current_report = metrics_from_ranks(&current, &cfg.ks, split)?;
    let mut ceiling = metrics_from_ranks(&best, &cfg.ks, split)?;
    let gap = current_report
        .metrics
        .iter()
        .zip(&ceiling.metrics)
        .map(|(c, o)| CutoffMetrics {
            k: c.k,
            recall: o.recall - c.recall,
            ndcg: o.ndcg - c.ndcg,
        })
        .collect();
    if cfg.keep_ranks {
        current_report.ranks = Some(current);
        ceiling.ranks = Some(best);
    }
    let secs = start.elapsed().as_secs_f64();
    current_report.runtime_seconds = secs;
    ceiling.runtime_seconds = secs;
    Ok(CeilingReport {
        current: current_report,
        ceiling,
        gap,
        best_candidate_counts: counts,
    })
}

fn rank_with(row: &[f32], s: &Sample, exclude_seen: bool) -> usize {
    if exclude_seen {
        let mut row = row.to_vec();
        mask_seen(&mut row, &s.context, s.target);
        rank_of(&row, s.target)
    } else {
        rank_of(row, s.target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub rate: f64,
    /// Seed of the removal draw; rerunning with it reproduces the dataset.
    pub perturbation_seed: u64,
    pub short_users: usize,
    pub metrics: MetricsReport,
}

/// Test metrics after dropping each training interaction with probability
/// `rate`. Every rate uses the same seed, so one position's removal draw is
/// shared across rates and the removed sets are nested.
pub fn robustness_run(
    model: &Model,
    dataset: &Dataset,
    rates: &[f64],
    seed: u64,
    cfg: &EvalConfig,
) -> Result<Vec<RobustnessPoint>> {
    rates
        .iter()
        .map(|&rate| {
            let (perturbed, short) = perturb_missing(dataset, rate, seed)?;
            Ok(RobustnessPoint {
                rate,
                perturbation_seed: seed,
                short_users: short,
                metrics: evaluate(model, &perturbed, Split::Test, cfg)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Mean over users of the pairwise squared distance between the
    /// step-averaged stream representations.
    pub representational: f64,
    pub users: usize,
}

/// Stream diversity of a model on one split's contexts (dropout off).
pub fn stream_diversity(model: &Model, dataset: &Dataset, split: Split) -> Result<DiversityReport> {
    let m = model.config.streams;
    if m < 2 {
        return Err(PlrError::Config(
            "diversity needs at least two streams".into(),
        ));
    }
    let samples = dataset.eval_samples(split)?;
    let mut total = 0.0;
    for chunk in samples.chunks(256) {
        let tape = Tape::new();
        let p = model.params.to_tape(&tape, false);
        let contexts: Vec<&[usize]> = chunk.iter().map(|s| s.context.as_slice()).collect();
        let batch = ContextBatch::new(&contexts, model.config.max_len, model.config.vocab_size)?;
        let out = run_batch(
            &p,
            &model.config,
            &batch,
            &mut Mode::Eval,
            Phase::Infer,
            None,
        )?;
        let pooled = out.pooled.value();
        for b in 0..chunk.len() {
            let z: Vec<Vec<f64>> = (0..m)
                .map(|s| pooled.row(b * m + s).iter().map(|&v| v as f64).collect())
                .collect();
            total += representational_diversity(&z)?;
        }
    }
    Ok(DiversityReport {
        representational: total / samples.len() as f64,
        users: samples.len(),
    })
}
