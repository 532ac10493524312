//! Analytic FLOP counts (two per multiply-accumulate) and a measured
//! base-versus-reasoning latency ratio.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{PlrError, Result};
use crate::model::{encode_sequence, ContextBatch, Mode, Model, PlrConfig};
use crate::tensor::Tape;

/// Shape parameters that drive the count. `steps = 0` or `streams = 0`
/// turns reasoning off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsConfig {
    pub seq_len: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub steps: usize,
    pub streams: usize,
    pub ffn_mult: usize,
}

impl FlopsConfig {
    /// n = 50, d = 256, two layers, two heads, T = M = 2.
    pub fn reference_scale() -> Self {
        Self {
            seq_len: 50,
            d: 256,
            layers: 2,
            heads: 2,
            steps: 2,
            streams: 2,
            ffn_mult: 4,
        }
    }

    pub fn from_model(cfg: &PlrConfig) -> Self {
        Self {
            seq_len: cfg.max_len,
            d: cfg.d,
            layers: cfg.layers,
            heads: cfg.heads,
            steps: cfg.steps,
            streams: cfg.streams,
            ffn_mult: cfg.ffn_dim() / cfg.d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub config: FlopsConfig,
    pub flops_base: u64,
    pub flops_reasoning: u64,
    pub flops_total: u64,
    pub ratio_vs_base: f64,
    pub assumptions: String,
}

const ASSUMPTIONS: &str = "FLOPs = 2 x multiply-accumulates. Counted: Q/K/V/O projections, \
attention scores and weighted values over all n x n pairs (causal masking not discounted), \
feed-forward d -> ffn_mult*d -> d, per layer. Each reasoning step of each stream is one \
position through every layer: Q and O projections, feed-forward, scores and values over n \
context keys plus the stream's t-1 earlier states, and K/V projections of the new state only \
when a later step will read them. Gate: M x d for the logits. Excluded: embedding lookup, \
layer norms, softmax, GeLU, biases, residual adds, dropout, and item scoring.";

pub fn count_flops(cfg: &FlopsConfig) -> Result<FlopsReport> {
    if cfg.seq_len == 0 || cfg.d == 0 || cfg.layers == 0 || cfg.heads == 0 || !cfg.d.is_multiple_of(cfg.heads)
    {
        return Err(PlrError::Config(format!(
            "incomplete shape for FLOP counting: {cfg:?}"
        )));
    }
    let (n, d, l) = (cfg.seq_len as u64, cfg.d as u64, cfg.layers as u64);
    let ffn = 2 * d * d * cfg.ffn_mult as u64;
    let base_macs = l * (n * (4 * d * d + ffn) + 2 * n * n * d);

    let mut reasoning_macs = 0;
    if cfg.steps > 0 && cfg.streams > 0 {
        let t_max = cfg.steps as u64;
        let mut per_stream = 0;
        for t in 1..=t_max {
            let keys = n + t - 1;
            let mut step = 2 * d * d + ffn + 2 * keys * d;
            if t < t_max {
                step += 2 * d * d;
            }
            per_stream += l * step;
        }
        reasoning_macs = cfg.streams as u64 * (per_stream + d);
    }
    let flops_base = 2 * base_macs;
    let flops_reasoning = 2 * reasoning_macs;
    let flops_total = flops_base + flops_reasoning;
    Ok(FlopsReport {
        config: cfg.clone(),
        flops_base,
        flops_reasoning,
        flops_total,
        ratio_vs_base: flops_total as f64 / flops_base as f64,
        assumptions: ASSUMPTIONS.into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub samples: usize,
    pub repeats: usize,
    pub base_seconds_per_sample: f64,
    pub full_seconds_per_sample: f64,
    pub ratio_vs_base: f64,
}

/// Wall-clock time of the encoder alone against the full inference pass
/// on the same contexts. Only the ratio is meaningful across machines.
pub fn measure_latency<C: AsRef<[usize]>>(
    model: &Model,
    contexts: &[C],
    repeats: usize,
) -> Result<LatencyReport> {
    if contexts.is_empty() || repeats == 0 {
        return Err(PlrError::Input(
            "latency needs contexts and at least one repeat".into(),
        ));
    }
    let cfg = &model.config;
    let batch = ContextBatch::new(contexts, cfg.max_len, cfg.vocab_size)?;
    let start = Instant::now();
    for _ in 0..repeats {
        let tape = Tape::new();
        let p = model.params.to_tape(&tape, false);
        let enc = encode_sequence(&p, cfg, &batch, &mut Mode::Eval)?;
        enc.h0.matmul_bt(p.item_embeddings)?;
    }
    let base = start.elapsed().as_secs_f64();
    let start = Instant::now();
    for _ in 0..repeats {
        model.score_contexts(contexts)?;
    }
    let full = start.elapsed().as_secs_f64();
    let per = (contexts.len() * repeats) as f64;
    Ok(LatencyReport {
        samples: contexts.len(),
        repeats,
        base_seconds_per_sample: base / per,
        full_seconds_per_sample: full / per,
        ratio_vs_base: full / base.max(f64::MIN_POSITIVE),
    })
}
