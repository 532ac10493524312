//! Iterated step maps: diversity decay, empirical Lipschitz constants, and
//! the refinement-diversity trade-off curve.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    embedding_geometry, ensemble_gap, representational_diversity, DistributionEnsemble, Verdict,
};
use crate::error::{PlrError, Result};
use crate::model::{
    encode_sequence, init_streams, reasoning_step, ContextBatch, Mode, Model, PlrParams,
};
use crate::tensor::{RngStream, Tape, Tensor};

const DIVERGENCE_NORM: f64 = 1e12;

/// Largest singular value.
pub fn spectral_norm(a: &[Vec<f64>]) -> Result<f64> {
    let rows = a.len();
    let cols = a.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || a.iter().any(|r| r.len() != cols) {
        return Err(PlrError::Input(
            "spectral norm needs a nonempty rectangular matrix".into(),
        ));
    }
    let m = DMatrix::from_fn(rows, cols, |i, j| a[i][j]);
    Ok(m.singular_values().max())
}

pub enum StepMap<'a> {
    Linear(Vec<Vec<f64>>),
    Function(Box<dyn Fn(&[f64]) -> Result<Vec<f64>> + 'a>),
}

impl StepMap<'_> {
    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        match self {
            StepMap::Linear(a) => {
                if a.first().map_or(0, Vec::len) != h.len() {
                    return Err(PlrError::Input(format!(
                        "state of length {} for a map with {} columns",
                        h.len(),
                        a.first().map_or(0, Vec::len)
                    )));
                }
                Ok(a.iter().map(|row| super::dot(row, h)).collect())
            }
            StepMap::Function(f) => f(h),
        }
    }
}

/// A step map with its declared Lipschitz constant.
pub struct LipschitzSystem<'a> {
    pub map: StepMap<'a>,
    pub declared_l: f64,
}

impl<'a> LipschitzSystem<'a> {
    /// Linear map with `L` set to its spectral norm.
    pub fn linear(a: Vec<Vec<f64>>) -> Result<Self> {
        let declared_l = spectral_norm(&a)?;
        Ok(Self {
            map: StepMap::Linear(a),
            declared_l,
        })
    }

    /// Linear map with a declared constant that must equal the spectral
    /// norm within 1e-6.
    pub fn linear_declared(a: Vec<Vec<f64>>, declared_l: f64) -> Result<Self> {
        let norm = spectral_norm(&a)?;
        if (norm - declared_l).abs() > 1e-6 {
            return Err(PlrError::Input(format!(
                "declared L = {declared_l} but the spectral norm is {norm}"
            )));
        }
        Ok(Self {
            map: StepMap::Linear(a),
            declared_l,
        })
    }

    pub fn function(f: impl Fn(&[f64]) -> Result<Vec<f64>> + 'a, declared_l: f64) -> Result<Self> {
        if !(declared_l >= 0.0) || !declared_l.is_finite() {
            return Err(PlrError::Input(format!(
                "declared L = {declared_l} must be finite and nonnegative"
            )));
        }
        Ok(Self {
            map: StepMap::Function(Box::new(f)),
            declared_l,
        })
    }

    /// `γ = −ln L`, defined for `0 < L < 1`.
    pub fn gamma(&self) -> Option<f64> {
        (self.declared_l > 0.0 && self.declared_l < 1.0).then(|| -self.declared_l.ln())
    }

    fn iterate(&self, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let next = states
            .iter()
            .map(|h| self.map.apply(h))
            .collect::<Result<Vec<_>>>()?;
        for h in &next {
            let norm = super::dot(h, h).sqrt();
            if !(norm <= DIVERGENCE_NORM) {
                return Err(PlrError::NonFinite(format!(
                    "trajectory diverged: state norm {norm:e} exceeds {DIVERGENCE_NORM:e}"
                )));
            }
        }
        Ok(next)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayTrace {
    /// `D^(t)` for `t = 0..=T`.
    pub diversity: Vec<f64>,
    pub declared_l: f64,
    /// `L^{2T} D^(0)`
    pub bound: f64,
    /// `D^(T) / (L^{2T} D^(0))`, how tight the bound is.
    pub tightness: f64,
    pub verdict: Verdict,
    /// Least-squares slope of `−ln D^(t)` per step, reported for `L < 1`.
    pub fitted_rate: Option<f64>,
    /// `2γ` for comparison with the fitted rate.
    pub two_gamma: Option<f64>,
}

pub const DECAY_REL_TOLERANCE: f64 = 1e-6;

pub fn diversity_decay_trace(
    system: &LipschitzSystem<'_>,
    initial: &[Vec<f64>],
    steps: usize,
) -> Result<DecayTrace> {
    if steps == 0 {
        return Err(PlrError::Input("the trace needs at least one step".into()));
    }
    if initial.len() < 2 {
        return Err(PlrError::Input(
            "the trace needs at least two states".into(),
        ));
    }
    let mut states = initial.to_vec();
    let mut diversity = vec![representational_diversity(&states)?];
    for _ in 0..steps {
        states = system.iterate(&states)?;
        diversity.push(representational_diversity(&states)?);
    }
    let l = system.declared_l;
    let bound = l.powi(2 * steps as i32) * diversity[0];
    let last = diversity[steps];
    let mut verdict = Verdict::new("D^(T) <= L^(2T) * D^(0) * (1 + 1e-6)");
    verdict.record(bound * (1.0 + DECAY_REL_TOLERANCE) - last);
    let fitted_rate = system.gamma().and_then(|_| fitted_decay_rate(&diversity));
    Ok(DecayTrace {
        tightness: if bound > 0.0 { last / bound } else { f64::NAN },
        diversity,
        declared_l: l,
        bound,
        verdict,
        fitted_rate,
        two_gamma: system.gamma().map(|g| 2.0 * g),
    })
}

/// Slope of `−ln D^(t)` against `t`, using only positive entries.
fn fitted_decay_rate(trace: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = trace
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0)
        .map(|(t, d)| (t as f64, -d.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// Largest observed ratio; a lower bound on the true constant.
    pub lower_bound: f64,
    pub probes: usize,
    pub skipped: usize,
}

/// `max ‖f(h) − f(h')‖ / ‖h − h'‖` over random pairs around each center:
/// `h = c + radius·u`, `h' = h + radius·u'` with `u, u'` Gaussian
/// directions scaled into the unit ball. Pairs with `h = h'` are skipped.
pub fn lipschitz_estimate(
    map: &StepMap<'_>,
    centers: &[Vec<f64>],
    probe_count: usize,
    radius: f64,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if probe_count < 100 {
        return Err(PlrError::Input(format!(
            "probe_count = {probe_count} is below 100"
        )));
    }
    if centers.is_empty() || !(radius > 0.0) {
        return Err(PlrError::Input(
            "probes need a center and a positive radius".into(),
        ));
    }
    let d = centers[0].len();
    let mut rng = RngStream::new(seed);
    let ball = |rng: &mut RngStream| -> Vec<f64> {
        let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = super::dot(&g, &g).sqrt().max(f64::MIN_POSITIVE);
        let r = radius * rng.uniform().powf(1.0 / d as f64);
        g.into_iter().map(|x| x * r / norm).collect()
    };
    let (mut best, mut skipped) = (0.0f64, 0);
    for i in 0..probe_count {
        let c = &centers[i % centers.len()];
        let h: Vec<f64> = c.iter().zip(ball(&mut rng)).map(|(a, b)| a + b).collect();
        let h2: Vec<f64> = h.iter().zip(ball(&mut rng)).map(|(a, b)| a + b).collect();
        let dh: f64 = h
            .iter()
            .zip(&h2)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if dh == 0.0 {
            skipped += 1;
            continue;
        }
        let (fa, fb) = (map.apply(&h)?, map.apply(&h2)?);
        let df: f64 = fa
            .iter()
            .zip(&fb)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        best = best.max(df / dh);
    }
    Ok(LipschitzEstimate {
        lower_bound: best,
        probes: probe_count - skipped,
        skipped,
    })
}

/// The trained first reasoning step as a map of its input state, with the
/// context, the step embedding `r_1` and all dropout masks fixed (dropout
/// off). Computed in double precision.
pub fn trained_step_map<'a>(
    model: &'a Model,
    context: &'a [usize],
) -> impl Fn(&[f64]) -> Result<Vec<f64>> + 'a {
    let params: PlrParams<f64> = model.params.cast();
    move |h: &[f64]| {
        let cfg = &model.config;
        if h.len() != cfg.d {
            return Err(PlrError::Input(format!(
                "state has {} entries, model width is {}",
                h.len(),
                cfg.d
            )));
        }
        let tape = Tape::new();
        let p = params.to_tape(&tape, false);
        let batch = ContextBatch::new(&[context], cfg.max_len, cfg.vocab_size)?;
        let enc = encode_sequence(&p, cfg, &batch, &mut Mode::Eval)?;
        let mut grid = init_streams(&enc, &p, cfg)?;
        let rows: Vec<f64> = (0..cfg.streams).flat_map(|_| h.iter().copied()).collect();
        grid.set_initial(tape.constant(Tensor::new(vec![cfg.streams, cfg.d], rows)?))?;
        reasoning_step(&mut grid, &p, cfg, 1, &mut Mode::Eval)?;
        Ok(grid.states[0].value().row(0).to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub step: usize,
    pub l_ind: f64,
    pub l_ens: f64,
    pub jensen_gap: f64,
    pub diversity: f64,
    /// `c · L^{2t} · D^(0)`, equal to `c·e^{−2γt}·D^(0)` when `L < 1`.
    pub bound_term: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub points: Vec<TradeoffPoint>,
    /// Step with the lowest measured ensemble loss (earliest on ties).
    pub best_step: usize,
    pub c: f64,
}

/// Iterates the system and scores the states with softmax linear scoring
/// against `embeddings`, measuring losses against `target` at every step.
pub fn tradeoff_curve(
    system: &LipschitzSystem<'_>,
    initial: &[Vec<f64>],
    max_steps: usize,
    embeddings: &[Vec<f64>],
    target: &[f64],
) -> Result<TradeoffCurve> {
    let c = embedding_geometry(embeddings)?.c;
    let l = system.declared_l;
    let mut states = initial.to_vec();
    let d0 = representational_diversity(&states)?;
    let mut points = Vec::with_capacity(max_steps + 1);
    for t in 0..=max_steps {
        if t > 0 {
            states = system.iterate(&states)?;
        }
        let ens = DistributionEnsemble::from_linear_scores(&states, embeddings)?;
        let gap = ensemble_gap(&ens, target)?;
        points.push(TradeoffPoint {
            step: t,
            l_ind: gap.l_ind,
            l_ens: gap.l_ens,
            jensen_gap: gap.jensen_gap,
            diversity: representational_diversity(&states)?,
            bound_term: c * l.powi(2 * t as i32) * d0,
        });
    }
    let best_step = points
        .iter()
        .fold(0, |b, p| if p.l_ens < points[b].l_ens { p.step } else { b });
    Ok(TradeoffCurve {
        points,
        best_step,
        c,
    })
}
