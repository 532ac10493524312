//! Batched forward pass on the tape.
//!
//! Contexts of different lengths are packed row-wise without padding; each
//! attention query carries its own key list. Reasoning queries see the
//! cached per-layer context keys plus their own stream's earlier states,
//! never another stream's.

use std::rc::Rc;

use super::params::{LayerParams, ParamVars};
use super::{Counters, Phase, PlrConfig};
use crate::error::{PlrError, Result};
use crate::tensor::{Float, KeyRef, RngStream, Tape, Tensor, Var};

/// Train mode draws dropout masks from the stream; eval mode draws nothing.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut RngStream),
}

impl Mode<'_> {
    fn dropout<'t, T: Float>(&mut self, x: Var<'t, T>, rate: f64) -> Result<Var<'t, T>> {
        match self {
            Mode::Train(rng) if rate > 0.0 => x.dropout(rate, rng),
            _ => Ok(x),
        }
    }

    fn attention_dropout(&mut self, rate: f64) -> Option<(f64, &mut RngStream)> {
        match self {
            Mode::Train(rng) if rate > 0.0 => Some((rate, &mut **rng)),
            _ => None,
        }
    }
}

/// Contexts packed row-wise, right-aligned onto the positional table.
#[derive(Clone, Debug)]
pub struct ContextBatch {
    pub items: Rc<Vec<usize>>,
    pub positions: Rc<Vec<usize>>,
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
    causal_keys: Rc<Vec<Vec<KeyRef>>>,
}

impl ContextBatch {
    /// Contexts longer than `max_len` keep their most recent items.
    pub fn new<C: AsRef<[usize]>>(
        contexts: &[C],
        max_len: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        if contexts.is_empty() {
            return Err(PlrError::Input("empty batch".into()));
        }
        let mut items = Vec::new();
        let mut positions = Vec::new();
        let mut starts = Vec::with_capacity(contexts.len());
        let mut lens = Vec::with_capacity(contexts.len());
        let mut keys = Vec::new();
        for c in contexts {
            let c = c.as_ref();
            if c.is_empty() {
                return Err(PlrError::Input("empty context".into()));
            }
            let c = &c[c.len().saturating_sub(max_len)..];
            if let Some(&bad) = c.iter().find(|&&i| i >= vocab_size) {
                return Err(PlrError::Input(format!(
                    "item index {bad} outside vocabulary of {vocab_size}"
                )));
            }
            let start = items.len();
            starts.push(start);
            lens.push(c.len());
            for (i, &item) in c.iter().enumerate() {
                items.push(item);
                positions.push(max_len - c.len() + i);
                keys.push((start..=start + i).map(|r| KeyRef::new(0, r)).collect());
            }
        }
        Ok(Self {
            items: Rc::new(items),
            positions: Rc::new(positions),
            starts,
            lens,
            causal_keys: Rc::new(keys),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.starts.len()
    }

    pub fn rows(&self) -> usize {
        self.items.len()
    }

    fn last_rows(&self) -> Vec<usize> {
        self.starts
            .iter()
            .zip(&self.lens)
            .map(|(s, n)| s + n - 1)
            .collect()
    }
}

/// Encoder outputs plus the per-layer context key/value cache.
pub struct Encoded<'t, T: Float> {
    /// Final encoder output, one row per packed context position.
    pub output: Var<'t, T>,
    /// Last row of every context: `[B × d]`.
    pub h0: Var<'t, T>,
    pub ctx_k: Vec<Var<'t, T>>,
    pub ctx_v: Vec<Var<'t, T>>,
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
    pub attention: Vec<Var<'t, T>>,
}

fn normalize<'t, T: Float>(
    cfg: &PlrConfig,
    x: Var<'t, T>,
    gain: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    if cfg.normalized {
        x.layer_norm(gain, bias)
    } else {
        Ok(x)
    }
}

/// Attention + residual, then feed-forward + residual, with `q` already
/// projected and the key/value parts supplied by the caller.
#[allow(clippy::too_many_arguments)]
fn sublayers<'t, T: Float>(
    layer: &LayerParams<Var<'t, T>>,
    cfg: &PlrConfig,
    x: Var<'t, T>,
    q: Var<'t, T>,
    k_parts: &[Var<'t, T>],
    v_parts: &[Var<'t, T>],
    keys: Rc<Vec<Vec<KeyRef>>>,
    mode: &mut Mode<'_>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let tape = x.tape();
    let att = tape.attention(
        q,
        k_parts,
        v_parts,
        keys,
        cfg.heads,
        mode.attention_dropout(cfg.dropout_attn),
    )?;
    let o = mode.dropout(att.matmul(layer.wo)?, cfg.dropout_rep)?;
    let mut x = x.add(o)?;
    if cfg.feed_forward {
        let a = normalize(cfg, x, layer.ln2_gain, layer.ln2_bias)?;
        let f = a.matmul(layer.w1)?.add_row(layer.b1)?.gelu()?;
        let f = f.matmul(layer.w2)?.add_row(layer.b2)?;
        x = x.add(mode.dropout(f, cfg.dropout_rep)?)?;
    }
    Ok((x, att))
}

/// Embeds and encodes a batch of contexts with causal self-attention.
pub fn encode_sequence<'t, T: Float>(
    p: &ParamVars<'t, T>,
    cfg: &PlrConfig,
    batch: &ContextBatch,
    mode: &mut Mode<'_>,
) -> Result<Encoded<'t, T>> {
    let tok = p.item_embeddings.gather_rows(Rc::clone(&batch.items))?;
    let pos = p.positions.gather_rows(Rc::clone(&batch.positions))?;
    let mut x = mode.dropout(tok.add(pos)?, cfg.dropout_rep)?;
    let mut ctx_k = Vec::with_capacity(cfg.layers);
    let mut ctx_v = Vec::with_capacity(cfg.layers);
    let mut attention = Vec::with_capacity(cfg.layers);
    for layer in &p.layers {
        let a = normalize(cfg, x, layer.ln1_gain, layer.ln1_bias)?;
        let (q, k, v) = (
            a.matmul(layer.wq)?,
            a.matmul(layer.wk)?,
            a.matmul(layer.wv)?,
        );
        let (out, att) = sublayers(
            layer,
            cfg,
            x,
            q,
            &[k],
            &[v],
            Rc::clone(&batch.causal_keys),
            mode,
        )?;
        x = out;
        ctx_k.push(k);
        ctx_v.push(v);
        attention.push(att);
    }
    let output = normalize(cfg, x, p.final_gain, p.final_bias)?;
    let h0 = output.gather_rows(Rc::new(batch.last_rows()))?;
    Ok(Encoded {
        output,
        h0,
        ctx_k,
        ctx_v,
        starts: batch.starts.clone(),
        lens: batch.lens.clone(),
        attention,
    })
}

/// Per-stream, per-step reasoning states for a batch. Rows of every state
/// matrix are ordered `(sample, stream)`.
pub struct ReasoningGrid<'t, T: Float> {
    pub batch: usize,
    pub streams: usize,
    pub steps: usize,
    pub h0: Var<'t, T>,
    /// `h_{0,m} = h_0 + τ_m`
    pub initial: Var<'t, T>,
    /// `h_{t,m}` for completed steps `t = 1..`
    pub states: Vec<Var<'t, T>>,
    /// Per layer, keys/values of this stream's completed steps (only steps
    /// that a later step can attend to).
    hist_k: Vec<Vec<Var<'t, T>>>,
    hist_v: Vec<Vec<Var<'t, T>>>,
    ctx_k: Vec<Var<'t, T>>,
    ctx_v: Vec<Var<'t, T>>,
    ctx_starts: Vec<usize>,
    ctx_lens: Vec<usize>,
    /// Attention nodes, `[step - 1][layer]`.
    pub attention: Vec<Vec<Var<'t, T>>>,
}

impl<'t, T: Float> ReasoningGrid<'t, T> {
    pub fn is_complete(&self) -> bool {
        self.states.len() == self.steps
    }

    /// Replaces the initial states `[B·M × d]` before any step has run.
    /// Used to probe the step map from arbitrary inputs.
    pub fn set_initial(&mut self, initial: Var<'t, T>) -> Result<()> {
        if !self.states.is_empty() {
            return Err(PlrError::State(
                "initial states are fixed once a step has run".into(),
            ));
        }
        let want = self.initial.shape();
        if initial.shape() != want {
            return Err(PlrError::Shape {
                op: "set_initial",
                lhs: initial.shape(),
                rhs: want,
            });
        }
        self.initial = initial;
        Ok(())
    }

    pub fn row(&self, sample: usize, stream: usize) -> usize {
        sample * self.streams + stream
    }

    /// Number of history entries cached for one stream, per layer.
    pub fn history_len(&self) -> usize {
        self.hist_k.first().map_or(0, Vec::len)
    }

    /// Keys visible to row `(b, m)` at step `t`: the context of `b`, then
    /// this row in each earlier step's history part.
    pub fn step_keys(&self, t: usize) -> Vec<Vec<KeyRef>> {
        let mut keys = Vec::with_capacity(self.batch * self.streams);
        for b in 0..self.batch {
            for m in 0..self.streams {
                let r = self.row(b, m);
                let start = self.ctx_starts[b];
                let mut list: Vec<KeyRef> = (start..start + self.ctx_lens[b])
                    .map(|row| KeyRef::new(0, row))
                    .collect();
                list.extend((1..t).map(|tp| KeyRef::new(tp, r)));
                keys.push(list);
            }
        }
        keys
    }
}

/// Adds each trigger token to the encoder state: `h_{0,m} = h_0 + τ_m`.
pub fn init_streams<'t, T: Float>(
    encoded: &Encoded<'t, T>,
    p: &ParamVars<'t, T>,
    cfg: &PlrConfig,
) -> Result<ReasoningGrid<'t, T>> {
    let batch = encoded.starts.len();
    let m = cfg.streams;
    let h0_idx: Vec<usize> = (0..batch).flat_map(|b| std::iter::repeat_n(b, m)).collect();
    let tau_idx: Vec<usize> = (0..batch).flat_map(|_| 0..m).collect();
    let initial = encoded
        .h0
        .gather_rows(Rc::new(h0_idx))?
        .add(p.triggers.gather_rows(Rc::new(tau_idx))?)?;
    Ok(ReasoningGrid {
        batch,
        streams: m,
        steps: cfg.steps,
        h0: encoded.h0,
        initial,
        states: Vec::with_capacity(cfg.steps),
        hist_k: vec![Vec::new(); cfg.layers],
        hist_v: vec![Vec::new(); cfg.layers],
        ctx_k: encoded.ctx_k.clone(),
        ctx_v: encoded.ctx_v.clone(),
        ctx_starts: encoded.starts.clone(),
        ctx_lens: encoded.lens.clone(),
        attention: Vec::with_capacity(cfg.steps),
    })
}

/// Runs step `t` (1-based) for every stream through the shared layer
/// stack. The step embedding `r_t` is added to the query input only; the
/// stored state and its cached keys/values carry no step embedding.
pub fn reasoning_step<'t, T: Float>(
    grid: &mut ReasoningGrid<'t, T>,
    p: &ParamVars<'t, T>,
    cfg: &PlrConfig,
    t: usize,
    mode: &mut Mode<'_>,
) -> Result<()> {
    if t != grid.states.len() + 1 || t > grid.steps {
        return Err(PlrError::State(format!(
            "reasoning step {t} requested after {} of {} steps",
            grid.states.len(),
            grid.steps
        )));
    }
    let prev = grid.states.last().copied().unwrap_or(grid.initial);
    let r_t = p.rpe.gather_rows(Rc::new(vec![t - 1]))?;
    let mut x = prev.add_row(r_t)?;
    let keys = Rc::new(grid.step_keys(t));
    let mut attention = Vec::with_capacity(cfg.layers);
    for (l, layer) in p.layers.iter().enumerate() {
        let a = normalize(cfg, x, layer.ln1_gain, layer.ln1_bias)?;
        let q = a.matmul(layer.wq)?;
        let mut k_parts = vec![grid.ctx_k[l]];
        k_parts.extend(&grid.hist_k[l][..t - 1]);
        let mut v_parts = vec![grid.ctx_v[l]];
        v_parts.extend(&grid.hist_v[l][..t - 1]);
        let (out, att) = sublayers(layer, cfg, x, q, &k_parts, &v_parts, Rc::clone(&keys), mode)?;
        x = out;
        attention.push(att);
    }
    let h = normalize(cfg, x, p.final_gain, p.final_bias)?;
    grid.states.push(h);
    grid.attention.push(attention);
    if t < grid.steps {
        for (l, layer) in p.layers.iter().enumerate() {
            let a = normalize(cfg, h, layer.ln1_gain, layer.ln1_bias)?;
            grid.hist_k[l].push(a.matmul(layer.wk)?);
            grid.hist_v[l].push(a.matmul(layer.wv)?);
        }
    }
    Ok(())
}

/// Mean over steps `1..=T` of every stream's states: `[B·M × d]`.
pub fn pool_streams<'t, T: Float>(grid: &ReasoningGrid<'t, T>) -> Result<Var<'t, T>> {
    if !grid.is_complete() {
        return Err(PlrError::State(format!(
            "pooling needs {} steps, grid has {}",
            grid.steps,
            grid.states.len()
        )));
    }
    let mut acc = grid.states[0];
    for &s in &grid.states[1..] {
        acc = acc.add(s)?;
    }
    if grid.steps == 1 {
        return Ok(acc);
    }
    acc.scale(T::lit(1.0 / grid.steps as f64))
}

/// Pooled output of stream `m` for every sample: `[B × d]`.
pub fn pool_stream<'t, T: Float>(grid: &ReasoningGrid<'t, T>, m: usize) -> Result<Var<'t, T>> {
    if m >= grid.streams {
        return Err(PlrError::Input(format!("stream {m} of {}", grid.streams)));
    }
    let pooled = pool_streams(grid)?;
    pooled.gather_rows(Rc::new((0..grid.batch).map(|b| grid.row(b, m)).collect()))
}

/// Softmax gate conditioned on `h_0` (uniform when gating is disabled) and
/// the gated sum of stream outputs. Returns `(z_rea [B × d], g [B × M])`.
pub fn gate_streams<'t, T: Float>(
    h0: Var<'t, T>,
    pooled: Var<'t, T>,
    p: &ParamVars<'t, T>,
    cfg: &PlrConfig,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let batch = h0.value().rows();
    let g = if cfg.mors_enabled {
        h0.matmul_bt(p.gate_w)?.add_row(p.gate_b)?.softmax_rows()?
    } else {
        let u = T::lit(1.0 / cfg.streams as f64);
        h0.tape().constant(Tensor::full(&[batch, cfg.streams], u))
    };
    Ok((g.weighted_row_sum(pooled)?, g))
}

/// `z_rea` while training, `h_0 + z_rea` at inference.
pub fn final_representation<'t, T: Float>(
    h0: Var<'t, T>,
    z_rea: Var<'t, T>,
    phase: Phase,
    counters: Option<&Counters>,
) -> Result<Var<'t, T>> {
    match phase {
        Phase::Train => {
            if let Some(c) = counters {
                Counters::bump(&c.train_outputs);
            }
            Ok(z_rea)
        }
        Phase::Infer => {
            if let Some(c) = counters {
                Counters::bump(&c.infer_outputs);
            }
            h0.add(z_rea)
        }
    }
}

/// Inner products with every item embedding: `[B × |V|]`.
pub fn score_items<'t, T: Float>(z: Var<'t, T>, p: &ParamVars<'t, T>) -> Result<Var<'t, T>> {
    z.matmul_bt(p.item_embeddings)
}

pub struct BatchOutput<'t, T: Float> {
    pub encoded: Encoded<'t, T>,
    pub grid: ReasoningGrid<'t, T>,
    pub pooled: Var<'t, T>,
    pub gate: Var<'t, T>,
    pub z_rea: Var<'t, T>,
    pub z: Var<'t, T>,
    pub logits: Var<'t, T>,
}

/// Full forward pass for one batch.
pub fn run_batch<'t, T: Float>(
    p: &ParamVars<'t, T>,
    cfg: &PlrConfig,
    batch: &ContextBatch,
    mode: &mut Mode<'_>,
    phase: Phase,
    counters: Option<&Counters>,
) -> Result<BatchOutput<'t, T>> {
    if let Some(c) = counters {
        Counters::bump(&c.forward_passes);
    }
    let encoded = encode_sequence(p, cfg, batch, mode)?;
    let mut grid = init_streams(&encoded, p, cfg)?;
    for t in 1..=cfg.steps {
        reasoning_step(&mut grid, p, cfg, t, mode)?;
    }
    let pooled = pool_streams(&grid)?;
    let (z_rea, gate) = gate_streams(encoded.h0, pooled, p, cfg)?;
    let z = final_representation(encoded.h0, z_rea, phase, counters)?;
    let logits = score_items(z, p)?;
    Ok(BatchOutput {
        encoded,
        grid,
        pooled,
        gate,
        z_rea,
        z,
        logits,
    })
}

impl super::Model {
    /// Inference-phase scores for a batch of contexts: `[B × |V|]`.
    pub fn score_contexts<C: AsRef<[usize]>>(&self, contexts: &[C]) -> Result<Tensor<f32>> {
        let batch = ContextBatch::new(contexts, self.config.max_len, self.config.vocab_size)?;
        let tape = Tape::new();
        let p = self.params.to_tape(&tape, false);
        let out = run_batch(
            &p,
            &self.config,
            &batch,
            &mut Mode::Eval,
            Phase::Infer,
            Some(&self.counters),
        )?;
        let logits = out.logits.value();
        Ok((*logits).clone())
    }
}
