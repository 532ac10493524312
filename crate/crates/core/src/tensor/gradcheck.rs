use serde::Serialize;

use super::{RngStream, Tensor};
use crate::error::{PlrError, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub samples: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            samples: 64,
            tolerance: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub passed: bool,
    pub checked: usize,
}

/// Compares analytic gradients with central differences on randomly chosen
/// scalar parameters.
///
/// `loss_and_grad` evaluates the loss at the given parameters and returns
/// the analytic gradient of every tensor. It must be a pure function of its
/// input: any randomness (dropout) has to be frozen by the caller.
pub fn finite_diff_check<F>(
    names: &[String],
    params: &[Tensor<f64>],
    mut loss_and_grad: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    if !(config.epsilon > 0.0) || config.samples == 0 {
        return Err(PlrError::Config(
            "gradient check needs epsilon > 0 and at least one sample".into(),
        ));
    }
    if names.len() != params.len() {
        return Err(PlrError::Input(
            "one name per parameter tensor required".into(),
        ));
    }
    let total: usize = params.iter().map(Tensor::len).sum();
    if total == 0 {
        return Err(PlrError::Input("no parameters to check".into()));
    }

    let (base, grads) = loss_and_grad(params)?;
    let (again, _) = loss_and_grad(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(PlrError::GradCheck(format!(
            "loss is not deterministic: {base} then {again} at identical parameters"
        )));
    }
    if grads.len() != params.len() {
        return Err(PlrError::GradCheck("gradient list length mismatch".into()));
    }

    let mut rng = RngStream::new(config.seed);
    let mut work = params.to_vec();
    let mut worst = (0.0f64, String::new());
    for _ in 0..config.samples {
        let mut flat = rng.below(total);
        let mut which = 0;
        while flat >= params[which].len() {
            flat -= params[which].len();
            which += 1;
        }
        let original = work[which].data()[flat];
        work[which].data_mut()[flat] = original + config.epsilon;
        let (plus, _) = loss_and_grad(&work)?;
        work[which].data_mut()[flat] = original - config.epsilon;
        let (minus, _) = loss_and_grad(&work)?;
        work[which].data_mut()[flat] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(PlrError::NonFinite(format!(
                "loss probe on {}[{flat}]",
                names[which]
            )));
        }

        let numeric = (plus - minus) / (2.0 * config.epsilon);
        let analytic = grads[which].data()[flat];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, format!("{}[{flat}]", names[which]));
        }
    }

    let (check, _) = loss_and_grad(params)?;
    if check.to_bits() != base.to_bits() {
        return Err(PlrError::GradCheck(
            "loss drifted between probes; is dropout frozen?".into(),
        ));
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_parameter: worst.1,
        passed: worst.0 <= config.tolerance,
        checked: config.samples,
    })
}
