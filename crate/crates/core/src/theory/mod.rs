//! Executable checks of the ensemble, diversity, decay and gating results.
//! Every expectation over the target distribution is an exact finite sum.

mod dynamics;
mod suite;

use serde::{Deserialize, Serialize};

use crate::error::{PlrError, Result};

pub use dynamics::{
    diversity_decay_trace, lipschitz_estimate, spectral_norm, tradeoff_curve, trained_step_map,
    DecayTrace, LipschitzEstimate, LipschitzSystem, StepMap, TradeoffCurve, TradeoffPoint,
};
pub use suite::{
    decay_suite, flat_dirichlet, gating_suite, jensen_suite, run_theory_suite,
    specialization_suite, trained_decay_check, DecaySummary, SpecializationSummary, SuiteConfig,
    TheoryReport, TrainedDecay, WorkedExample, SCHEMA_VERSION,
};

const SUM_TOLERANCE: f64 = 1e-8;

/// Outcome of one inequality over one or many instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// The inequality being checked, written out.
    pub inequality: String,
    /// Observations are reported but never fail a run.
    pub asserted: bool,
    pub passed: bool,
    pub trials: usize,
    pub failures: usize,
    pub skipped: usize,
    /// Smallest `lhs − rhs` seen (negative means violated).
    pub worst_slack: f64,
}

impl Verdict {
    pub fn new(inequality: &str) -> Self {
        Self {
            inequality: inequality.into(),
            asserted: true,
            passed: true,
            trials: 0,
            failures: 0,
            skipped: 0,
            worst_slack: f64::INFINITY,
        }
    }

    pub fn observation(inequality: &str) -> Self {
        Self {
            asserted: false,
            ..Self::new(inequality)
        }
    }

    /// Records `slack = lhs − rhs`; the trial passes when `slack ≥ 0`.
    pub fn record(&mut self, slack: f64) {
        self.trials += 1;
        self.worst_slack = self.worst_slack.min(slack);
        if !(slack >= 0.0) {
            self.failures += 1;
            self.passed = false;
        }
    }

    pub fn skip(&mut self) {
        self.skipped += 1;
    }
}

pub fn validate_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(PlrError::Input(format!("{what} is empty")));
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(PlrError::Input(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(PlrError::Input(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// Member distributions over a shared vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionEnsemble {
    members: Vec<Vec<f64>>,
}

impl DistributionEnsemble {
    pub fn new(members: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(PlrError::Input(
                "an ensemble needs at least one member".into(),
            ));
        };
        let v = first.len();
        for (m, p) in members.iter().enumerate() {
            if p.len() != v {
                return Err(PlrError::Input(format!(
                    "member {m} has {} items, member 0 has {v}",
                    p.len()
                )));
            }
            validate_distribution(p, &format!("member {m}"))?;
        }
        Ok(Self { members })
    }

    /// Softmax of linear scores `z_m · e_v`.
    pub fn from_linear_scores(z: &[Vec<f64>], embeddings: &[Vec<f64>]) -> Result<Self> {
        let members = z
            .iter()
            .map(|zm| {
                let logits: Vec<f64> = embeddings.iter().map(|e| dot(zm, e)).collect();
                softmax(&logits)
            })
            .collect();
        Self::new(members)
    }

    pub fn members(&self) -> &[Vec<f64>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.members[0].len()
    }

    /// `Σ_m w_m p̂_m`
    pub fn mixture(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab()];
        for (w, p) in weights.iter().zip(&self.members) {
            for (o, x) in out.iter_mut().zip(p) {
                *o += w * x;
            }
        }
        out
    }

    pub fn uniform_weights(&self) -> Vec<f64> {
        vec![1.0 / self.len() as f64; self.len()]
    }

    fn check_target(&self, target: &[f64]) -> Result<()> {
        if target.len() != self.vocab() {
            return Err(PlrError::Input(format!(
                "target covers {} items, members cover {}",
                target.len(),
                self.vocab()
            )));
        }
        validate_distribution(target, "target distribution")
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `E_{v~p*}[−ln q(v)]`, skipping items outside the target's support.
/// Infinite when `q` is zero somewhere on that support.
pub fn cross_entropy(target: &[f64], q: &[f64]) -> f64 {
    target
        .iter()
        .zip(q)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, x)| if *x > 0.0 { -t * x.ln() } else { f64::INFINITY })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleGap {
    pub l_ens: f64,
    pub l_ind: f64,
    /// `l_ind − l_ens`, summed only over items where the mixture is
    /// positive.
    pub jensen_gap: f64,
    /// Target-supported items every member assigns zero: both losses are
    /// infinite there.
    pub infinite_items: Vec<usize>,
}

pub fn ensemble_gap(ensemble: &DistributionEnsemble, target: &[f64]) -> Result<EnsembleGap> {
    ensemble.check_target(target)?;
    let mean = ensemble.mixture(&ensemble.uniform_weights());
    let m = ensemble.len() as f64;
    let l_ens = cross_entropy(target, &mean);
    let l_ind = ensemble
        .members()
        .iter()
        .map(|p| cross_entropy(target, p))
        .sum::<f64>()
        / m;
    let mut gap = 0.0;
    let mut infinite_items = Vec::new();
    for v in 0..target.len() {
        if target[v] == 0.0 {
            continue;
        }
        if mean[v] == 0.0 {
            infinite_items.push(v);
            continue;
        }
        let ind: f64 = ensemble
            .members()
            .iter()
            .map(|p| {
                if p[v] > 0.0 {
                    -p[v].ln()
                } else {
                    f64::INFINITY
                }
            })
            .sum::<f64>()
            / m;
        gap += target[v] * (ind + mean[v].ln());
    }
    Ok(EnsembleGap {
        l_ens,
        l_ind,
        jensen_gap: gap,
        infinite_items,
    })
}

/// `(1 / (M(M−1))) Σ_{m≠m'} ‖z_m − z_{m'}‖²`
pub fn representational_diversity(z: &[Vec<f64>]) -> Result<f64> {
    let m = z.len();
    if m < 2 {
        return Err(PlrError::Input(format!(
            "diversity needs at least two vectors, got {m}"
        )));
    }
    let d = z[0].len();
    if z.iter().any(|v| v.len() != d) {
        return Err(PlrError::Input("diversity vectors differ in length".into()));
    }
    let mut sum = 0.0;
    for a in 0..m {
        for b in a + 1..m {
            sum += z[a]
                .iter()
                .zip(&z[b])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>();
        }
    }
    Ok(2.0 * sum / (m * (m - 1)) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingGeometry {
    /// `max_v ‖e_v‖`
    pub r: f64,
    /// `min_{v≠v'} ‖e_v − e_{v'}‖`
    pub delta_e: f64,
    /// `δ_e² / (8R²)`
    pub c: f64,
}

pub fn embedding_geometry(embeddings: &[Vec<f64>]) -> Result<EmbeddingGeometry> {
    if embeddings.len() < 2 {
        return Err(PlrError::Input(
            "geometry needs at least two embeddings".into(),
        ));
    }
    let norm = |v: &[f64]| dot(v, v).sqrt();
    let r = embeddings.iter().map(|e| norm(e)).fold(0.0, f64::max);
    let mut delta_e = f64::INFINITY;
    for a in 0..embeddings.len() {
        for b in a + 1..embeddings.len() {
            let diff: Vec<f64> = embeddings[a]
                .iter()
                .zip(&embeddings[b])
                .map(|(x, y)| x - y)
                .collect();
            delta_e = delta_e.min(norm(&diff));
        }
    }
    let c = if r > 0.0 {
        delta_e * delta_e / (8.0 * r * r)
    } else {
        0.0
    };
    Ok(EmbeddingGeometry { r, delta_e, c })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub geometry: EmbeddingGeometry,
    pub diversity: f64,
    pub jensen_gap: f64,
    /// `I − c·D`
    pub slack: f64,
    /// False when `δ_e = 0`: the bound is vacuous and nothing is asserted.
    pub applicable: bool,
    pub holds: bool,
}

pub const SPECIALIZATION_TOLERANCE: f64 = 1e-6;

/// Checks `I ≥ c·D − 1e-6` for the softmax-of-linear-score members.
pub fn specialization_bound_check(
    z: &[Vec<f64>],
    embeddings: &[Vec<f64>],
    target: &[f64],
) -> Result<BoundCheck> {
    let geometry = embedding_geometry(embeddings)?;
    let diversity = representational_diversity(z)?;
    let ensemble = DistributionEnsemble::from_linear_scores(z, embeddings)?;
    let gap = ensemble_gap(&ensemble, target)?;
    let slack = gap.jensen_gap - geometry.c * diversity;
    let applicable = geometry.delta_e > 0.0;
    Ok(BoundCheck {
        holds: !applicable || slack >= -SPECIALIZATION_TOLERANCE,
        geometry,
        diversity,
        jensen_gap: gap.jensen_gap,
        slack,
        applicable,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingBenefit {
    pub l_gated: f64,
    pub l_uniform: f64,
    /// `l_uniform − l_gated`
    pub gain: f64,
    /// `Σ_m w_m E_{v~p*}[ln(p̂_m(v) / p̃(v))]` as written for the gating
    /// result. It is not the standard conditional mutual information.
    pub mi_style: f64,
}

pub fn validate_weights(w: &[f64], members: usize) -> Result<()> {
    if w.len() != members {
        return Err(PlrError::Input(format!(
            "{} weights for {members} members",
            w.len()
        )));
    }
    validate_distribution(w, "gate weights")
}

pub fn gating_benefit(
    ensemble: &DistributionEnsemble,
    weights: &[f64],
    target: &[f64],
) -> Result<GatingBenefit> {
    ensemble.check_target(target)?;
    validate_weights(weights, ensemble.len())?;
    let gated = ensemble.mixture(weights);
    let uniform = ensemble.mixture(&ensemble.uniform_weights());
    let l_gated = cross_entropy(target, &gated);
    let l_uniform = cross_entropy(target, &uniform);
    let mut mi_style = 0.0;
    for (w, p) in weights.iter().zip(ensemble.members()) {
        if *w == 0.0 {
            continue;
        }
        let inner: f64 = target
            .iter()
            .zip(p)
            .zip(&gated)
            .filter(|((t, _), _)| **t > 0.0)
            .map(|((t, pm), g)| t * (pm.ln() - g.ln()))
            .sum();
        mi_style += w * inner;
    }
    Ok(GatingBenefit {
        l_gated,
        l_uniform,
        gain: l_uniform - l_gated,
        mi_style,
    })
}

/// All weight on the member with the lowest individual loss (first on ties).
pub fn vertex_weights(ensemble: &DistributionEnsemble, target: &[f64]) -> Result<Vec<f64>> {
    ensemble.check_target(target)?;
    let losses: Vec<f64> = ensemble
        .members()
        .iter()
        .map(|p| cross_entropy(target, p))
        .collect();
    let best = (0..losses.len()).fold(0, |b, m| if losses[m] < losses[b] { m } else { b });
    let mut w = vec![0.0; ensemble.len()];
    w[best] = 1.0;
    Ok(w)
}

/// `softmax(−L_m / temperature)` over individual losses.
pub fn loss_softmax_weights(
    ensemble: &DistributionEnsemble,
    target: &[f64],
    temperature: f64,
) -> Result<Vec<f64>> {
    ensemble.check_target(target)?;
    if !(temperature > 0.0) {
        return Err(PlrError::Input("temperature must be positive".into()));
    }
    let scores: Vec<f64> = ensemble
        .members()
        .iter()
        .map(|p| -cross_entropy(target, p) / temperature)
        .collect();
    if scores.iter().all(|s| *s == f64::NEG_INFINITY) {
        return Ok(ensemble.uniform_weights());
    }
    Ok(softmax(&scores))
}
