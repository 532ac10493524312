//! The recommender: a causal self-attention encoder, parallel reasoning
//! streams seeded by trigger tokens, a softmax gate over streams, and
//! full-vocabulary scoring.

mod attention;
mod checkpoint;
mod forward;
mod params;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{PlrError, Result};

pub use attention::{dump_attention, AttentionDump, StepAttention};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{
    encode_sequence, final_representation, gate_streams, init_streams, pool_stream, pool_streams,
    reasoning_step, run_batch, score_items, BatchOutput, ContextBatch, Encoded, Mode,
    ReasoningGrid,
};
pub use params::{LayerParams, ParamVars, PlrParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlrConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    /// Reasoning steps per stream.
    pub steps: usize,
    /// Parallel reasoning streams.
    pub streams: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_rep: f64,
    pub dropout_attn: f64,
    pub mors_enabled: bool,
    pub rcl_enabled: bool,
    pub kl_enabled: bool,
    /// Pre-layer normalization plus a final normalization.
    pub normalized: bool,
    /// Position-wise feed-forward sublayer after attention.
    pub feed_forward: bool,
}

impl Default for PlrConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 2,
            layers: 2,
            steps: 2,
            streams: 2,
            max_len: 20,
            vocab_size: 500,
            dropout_rep: 0.1,
            dropout_attn: 0.1,
            mors_enabled: true,
            rcl_enabled: true,
            kl_enabled: true,
            normalized: true,
            feed_forward: true,
        }
    }
}

impl PlrConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PlrError::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!(
                "d = {} must be a positive multiple of heads = {}",
                self.d, self.heads
            ));
        }
        if self.layers == 0 {
            return bad("at least one layer is required".into());
        }
        if self.steps == 0 || self.streams == 0 {
            return bad("steps and streams must both be at least 1".into());
        }
        if self.max_len == 0 || self.vocab_size == 0 {
            return bad("max_len and vocab_size must be positive".into());
        }
        for (name, p) in [
            ("dropout_rep", self.dropout_rep),
            ("dropout_attn", self.dropout_attn),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d
    }
}

/// Training scores with the reasoning output alone; inference adds the
/// encoder state back in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Call counts used to check structural contracts.
#[derive(Debug, Default)]
pub struct Counters {
    pub forward_passes: AtomicUsize,
    pub train_outputs: AtomicUsize,
    pub infer_outputs: AtomicUsize,
}

impl Counters {
    pub fn get(c: &AtomicUsize) -> usize {
        c.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        for c in [
            &self.forward_passes,
            &self.train_outputs,
            &self.infer_outputs,
        ] {
            c.store(0, Ordering::Relaxed);
        }
    }

    pub(crate) fn bump(c: &AtomicUsize) {
        c.fetch_add(1, Ordering::Relaxed);
    }
}

/// Configuration, parameters, and instrumentation.
#[derive(Debug)]
pub struct Model {
    pub config: PlrConfig,
    pub params: PlrParams<f32>,
    pub counters: Counters,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            counters: Counters::default(),
        }
    }
}

impl Model {
    pub fn new(config: PlrConfig, seed: u64) -> Result<Self> {
        let params = PlrParams::init(&config, seed)?;
        Ok(Self {
            config,
            params,
            counters: Counters::default(),
        })
    }

    pub fn from_params(config: PlrConfig, params: PlrParams<f32>) -> Result<Self> {
        params.check_shapes(&config)?;
        Ok(Self {
            config,
            params,
            counters: Counters::default(),
        })
    }
}
