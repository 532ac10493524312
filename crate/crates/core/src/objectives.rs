//! Next-item cross-entropy, pairwise KL between reasoning-state item
//! distributions, two-view contrastive loss over reasoning states, and
//! their weighted sum.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{PlrError, Result};
use crate::model::{
    run_batch, ContextBatch, Counters, Mode, ParamVars, Phase, PlrConfig, ReasoningGrid,
};
use crate::tensor::{kernels, Float, RngStream, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_kl: f64,
    /// Contrastive temperature.
    pub temperature: f64,
    /// +1 penalizes divergence between states, -1 rewards it.
    pub kl_sign: f64,
    pub rcl_enabled: bool,
    pub kl_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_kl: 0.1,
            temperature: 1.0,
            kl_sign: -1.0,
            rcl_enabled: true,
            kl_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kl >= 0.0) || !self.lambda_kl.is_finite() {
            return Err(PlrError::Config(format!(
                "lambda_kl = {} must be >= 0",
                self.lambda_kl
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(PlrError::Config(format!(
                "temperature = {} must be > 0",
                self.temperature
            )));
        }
        if self.kl_sign != 1.0 && self.kl_sign != -1.0 {
            return Err(PlrError::Config(format!(
                "kl_sign = {} must be +1 or -1",
                self.kl_sign
            )));
        }
        Ok(())
    }

    /// Takes the term switches from the model configuration.
    pub fn for_model(model: &PlrConfig, lambda_kl: f64, temperature: f64, kl_sign: f64) -> Self {
        Self {
            lambda_kl,
            temperature,
            kl_sign,
            rcl_enabled: model.rcl_enabled,
            kl_enabled: model.kl_enabled,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub nip: f64,
    pub kl: f64,
    pub rcl: f64,
    pub total: f64,
}

/// Mean cross-entropy of the targets under `softmax(logits)`.
pub fn nip_loss<'t, T: Float>(logits: Var<'t, T>, targets: &[usize]) -> Result<Var<'t, T>> {
    logits.cross_entropy(Rc::new(targets.to_vec()))
}

/// Item logits of every reasoning state, rows grouped per sample and
/// ordered `(stream, step)` within a sample: `[B·M·T × |V|]`.
pub fn reasoning_logits<'t, T: Float>(
    grid: &ReasoningGrid<'t, T>,
    p: &ParamVars<'t, T>,
) -> Result<Var<'t, T>> {
    let tape = grid.h0.tape();
    let stacked = tape.concat_rows(&grid.states)?;
    let rows_per_step = grid.batch * grid.streams;
    let mut index = Vec::with_capacity(rows_per_step * grid.steps);
    for b in 0..grid.batch {
        for m in 0..grid.streams {
            for t in 0..grid.steps {
                index.push(t * rows_per_step + grid.row(b, m));
            }
        }
    }
    stacked
        .gather_rows(Rc::new(index))?
        .matmul_bt(p.item_embeddings)
}

/// `p_{t,m} = softmax(h_{t,m} · E)` in the layout of `reasoning_logits`.
pub fn reasoning_distributions<'t, T: Float>(
    grid: &ReasoningGrid<'t, T>,
    p: &ParamVars<'t, T>,
) -> Result<Var<'t, T>> {
    reasoning_logits(grid, p)?.softmax_rows()
}

/// Mean KL divergence over ordered pairs of distinct rows of a probability
/// matrix; zero when there is a single row.
pub fn kl_regularization<T: Float>(p: &Tensor<T>) -> Result<f64> {
    let n = p.rows();
    for r in 0..n {
        let row = p.row(r);
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-4 || row.iter().any(|v| v.as_f64() < 0.0) {
            return Err(PlrError::Input(format!(
                "distribution row {r} sums to {sum}, not 1"
            )));
        }
    }
    if n < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for (&a, &b) in p.row(i).iter().zip(p.row(j)) {
                let (a, b) = (a.as_f64(), b.as_f64());
                if a > 0.0 {
                    total += a * (a / b).ln();
                }
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// Differentiable pairwise KL over each sample's `T·M` reasoning states,
/// averaged over the batch.
pub fn kl_regularization_var<'t, T: Float>(
    logits: Var<'t, T>,
    states_per_sample: usize,
) -> Result<Var<'t, T>> {
    logits.pairwise_kl(states_per_sample)
}

/// Symmetric in-batch InfoNCE between two views of every reasoning state.
/// For each (step, stream) the two directions are summed; the result is
/// averaged over all step/stream pairs.
pub fn rcl_loss<'t, T: Float>(
    view1: &ReasoningGrid<'t, T>,
    view2: &ReasoningGrid<'t, T>,
    temperature: f64,
) -> Result<Var<'t, T>> {
    if view1.batch != view2.batch
        || view1.streams != view2.streams
        || view1.states.len() != view2.states.len()
    {
        return Err(PlrError::Input(
            "contrastive views have different layouts".into(),
        ));
    }
    rcl_from_states(
        &view1.states,
        &view2.states,
        view1.batch,
        view1.streams,
        temperature,
    )
}

/// As `rcl_loss`, on raw per-step state matrices with rows `(sample, stream)`.
pub fn rcl_from_states<'t, T: Float>(
    view1: &[Var<'t, T>],
    view2: &[Var<'t, T>],
    batch: usize,
    streams: usize,
    temperature: f64,
) -> Result<Var<'t, T>> {
    if batch < 2 {
        return Err(PlrError::Input(
            "contrastive loss needs at least two users per batch".into(),
        ));
    }
    if view1.is_empty() || view1.len() != view2.len() {
        return Err(PlrError::Input(
            "contrastive views need the same non-zero step count".into(),
        ));
    }
    let inv_tau = T::lit(1.0 / temperature);
    let targets = Rc::new((0..batch).collect::<Vec<_>>());
    let mut sum: Option<Var<'t, T>> = None;
    for (a, b) in view1.iter().zip(view2) {
        for m in 0..streams {
            let idx = Rc::new((0..batch).map(|u| u * streams + m).collect::<Vec<_>>());
            let x = a.gather_rows(Rc::clone(&idx))?.normalize_rows()?;
            let y = b.gather_rows(idx)?.normalize_rows()?;
            let forward = x
                .matmul_bt(y)?
                .scale(inv_tau)?
                .cross_entropy(Rc::clone(&targets))?;
            let backward = y
                .matmul_bt(x)?
                .scale(inv_tau)?
                .cross_entropy(Rc::clone(&targets))?;
            let term = forward.add(backward)?;
            sum = Some(match sum {
                Some(acc) => acc.add(term)?,
                None => term,
            });
        }
    }
    let pairs = (view1.len() * streams) as f64;
    sum.expect("at least one term").scale(T::lit(1.0 / pairs))
}

/// `total = nip + rcl·[rcl on] + kl_sign·λ·kl·[kl on]`; disabled terms
/// contribute exactly zero.
pub fn total_loss(nip: f64, kl: f64, rcl: f64, cfg: &LossConfig) -> LossBreakdown {
    let mut total = nip;
    if cfg.rcl_enabled {
        total += rcl;
    }
    if cfg.kl_enabled {
        total += cfg.kl_sign * cfg.lambda_kl * kl;
    }
    LossBreakdown {
        nip,
        kl,
        rcl,
        total,
    }
}

/// Forward passes and the differentiable total for one training batch.
pub struct Objective<'t, T: Float> {
    pub total: Var<'t, T>,
    pub breakdown: LossBreakdown,
    pub view1: crate::model::BatchOutput<'t, T>,
    pub forward_passes: usize,
}

/// Builds the training objective. View 1 feeds the next-item and KL terms;
/// a second, independently masked view is run only for the contrastive term.
#[allow(clippy::too_many_arguments)]
pub fn objective<'t, T: Float>(
    p: &ParamVars<'t, T>,
    model_cfg: &PlrConfig,
    loss_cfg: &LossConfig,
    batch: &ContextBatch,
    targets: &[usize],
    rng_view1: Option<&mut RngStream>,
    rng_view2: Option<&mut RngStream>,
    counters: Option<&Counters>,
) -> Result<Objective<'t, T>> {
    let mut mode1 = rng_view1.map_or(Mode::Eval, Mode::Train);
    let view1 = run_batch(p, model_cfg, batch, &mut mode1, Phase::Train, counters)?;
    let nip = nip_loss(view1.logits, targets)?;
    let mut total = nip;
    let mut forward_passes = 1;

    let mut kl_value = 0.0;
    if loss_cfg.kl_enabled {
        let kl = kl_regularization_var(
            reasoning_logits(&view1.grid, p)?,
            model_cfg.steps * model_cfg.streams,
        )?;
        kl_value = kl.value().item().as_f64();
        if loss_cfg.lambda_kl > 0.0 {
            total = total.add(kl.scale(T::lit(loss_cfg.kl_sign * loss_cfg.lambda_kl))?)?;
        }
    }

    let mut rcl_value = 0.0;
    if loss_cfg.rcl_enabled {
        let mut mode2 = rng_view2.map_or(Mode::Eval, Mode::Train);
        let view2 = run_batch(p, model_cfg, batch, &mut mode2, Phase::Train, counters)?;
        forward_passes += 1;
        let rcl = rcl_loss(&view1.grid, &view2.grid, loss_cfg.temperature)?;
        rcl_value = rcl.value().item().as_f64();
        total = total.add(rcl)?;
    }

    let nip_value = nip.value().item().as_f64();
    let mut breakdown = total_loss(nip_value, kl_value, rcl_value, loss_cfg);
    breakdown.total = total.value().item().as_f64();
    Ok(Objective {
        total,
        breakdown,
        view1,
        forward_passes,
    })
}

/// Cosine similarity, used by tests and diagnostics.
pub fn cosine<T: Float>(a: &[T], b: &[T]) -> f64 {
    let d = kernels::dot(a, b).as_f64();
    d / (kernels::dot(a, a).as_f64().sqrt() * kernels::dot(b, b).as_f64().sqrt())
}
