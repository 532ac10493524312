//! Raw attention weights of the reasoning streams for one context.

use serde::{Deserialize, Serialize};

use super::{run_batch, ContextBatch, Mode, Model, Phase, PlrParams};
use crate::error::{PlrError, Result};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAttention {
    pub stream: usize,
    /// 1-based reasoning step.
    pub step: usize,
    pub layer: usize,
    /// `ctx:<position>` for context rows, `step:<t>` for this stream's own
    /// earlier steps.
    pub keys: Vec<String>,
    /// `weights[head][key]`
    pub weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub context: Vec<usize>,
    pub heads: usize,
    /// Gate weight of each stream.
    pub gate: Vec<f64>,
    pub reasoning: Vec<StepAttention>,
}

/// Inference-mode attention of every stream, step and layer. Dropout is off
/// and probabilities are taken before any attention dropout.
pub fn dump_attention(model: &Model, context: &[usize]) -> Result<AttentionDump> {
    let cfg = &model.config;
    if context.is_empty() {
        return Err(PlrError::Input(
            "attention dump needs a non-empty context".into(),
        ));
    }
    let params: PlrParams<f64> = model.params.cast();
    let tape = Tape::new();
    let p = params.to_tape(&tape, false);
    let batch = ContextBatch::new(&[context], cfg.max_len, cfg.vocab_size)?;
    let out = run_batch(&p, cfg, &batch, &mut Mode::Eval, Phase::Infer, None)?;
    let kept = context.len().min(cfg.max_len);
    let offset = context.len() - kept;
    let mut reasoning = Vec::new();
    for (t, layers) in out.grid.attention.iter().enumerate() {
        for (l, var) in layers.iter().enumerate() {
            let record = tape.attention_record(*var).ok_or_else(|| {
                PlrError::State("reasoning node carries no attention record".into())
            })?;
            for m in 0..cfg.streams {
                let row = out.grid.row(0, m);
                let keys = record.keys[row]
                    .iter()
                    .map(|k| match k.part {
                        0 => format!("ctx:{}", offset + k.row as usize),
                        s => format!("step:{s}"),
                    })
                    .collect();
                reasoning.push(StepAttention {
                    stream: m,
                    step: t + 1,
                    layer: l,
                    keys,
                    weights: record.probs[row].clone(),
                });
            }
        }
    }
    Ok(AttentionDump {
        context: context.to_vec(),
        heads: cfg.heads,
        gate: out.gate.value().row(0).to_vec(),
        reasoning,
    })
}
