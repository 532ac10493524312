//! Shared test oracles: a plain-loop, uncached forward pass written without
//! the tape, and helpers for random configurations.

#![allow(dead_code)]

use plr_core::model::{PlrConfig, PlrParams};
use plr_core::tensor::{RngStream, Tensor};

pub type Vector = Vec<f64>;

fn row(t: &Tensor<f64>, i: usize) -> Vector {
    t.row(i).to_vec()
}

/// `x · W` for `W: [in × out]`.
fn linear(x: &[f64], w: &Tensor<f64>) -> Vector {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), din);
    let mut out = vec![0.0; dout];
    for i in 0..din {
        for j in 0..dout {
            out[j] += x[i] * w.data()[i * dout + j];
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vector {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn layer_norm(x: &[f64], g: &Tensor<f64>, b: &Tensor<f64>) -> Vector {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / denom * g.data()[i] + b.data()[i])
        .collect()
}

fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn softmax(x: &[f64]) -> Vector {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vector = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Multi-head attention of one query over explicit keys and values.
fn attend(q: &[f64], keys: &[Vector], values: &[Vector], heads: usize) -> Vector {
    let d = q.len();
    let dh = d / heads;
    let mut out = vec![0.0; d];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let scores: Vector = keys
            .iter()
            .map(|k| dot(&q[r.clone()], &k[r.clone()]) / (dh as f64).sqrt())
            .collect();
        let w = softmax(&scores);
        for (wi, v) in w.iter().zip(values) {
            for j in r.clone() {
                out[j] += wi * v[j];
            }
        }
    }
    out
}

pub struct Reference<'a> {
    pub p: &'a PlrParams<f64>,
    pub cfg: &'a PlrConfig,
}

pub struct RefOutput {
    pub h0: Vector,
    /// `states[m][t-1] = h_{t,m}`
    pub states: Vec<Vec<Vector>>,
    pub pooled: Vec<Vector>,
    pub gate: Vector,
    pub z_rea: Vector,
    pub z_infer: Vector,
    pub train_logits: Vector,
    pub infer_logits: Vector,
}

impl<'a> Reference<'a> {
    fn ln1(&self, l: usize, x: &[f64]) -> Vector {
        let lp = &self.p.layers[l];
        if self.cfg.normalized {
            layer_norm(x, &lp.ln1_gain, &lp.ln1_bias)
        } else {
            x.to_vec()
        }
    }

    fn final_norm(&self, x: &[f64]) -> Vector {
        if self.cfg.normalized {
            layer_norm(x, &self.p.final_gain, &self.p.final_bias)
        } else {
            x.to_vec()
        }
    }

    /// Residual attention output plus the feed-forward sublayer.
    fn finish_layer(&self, l: usize, x: &[f64], attn: &[f64]) -> Vector {
        let lp = &self.p.layers[l];
        let mut x = add(x, &linear(attn, &lp.wo));
        if self.cfg.feed_forward {
            let a = if self.cfg.normalized {
                layer_norm(&x, &lp.ln2_gain, &lp.ln2_bias)
            } else {
                x.clone()
            };
            let hidden: Vector = add(&linear(&a, &lp.w1), lp.b1.data())
                .into_iter()
                .map(gelu_tanh)
                .collect();
            x = add(&x, &add(&linear(&hidden, &lp.w2), lp.b2.data()));
        }
        x
    }

    /// Encodes a context one layer at a time, one position at a time.
    /// Returns the final rows and, per layer, the normalized layer inputs.
    pub fn encode(&self, context: &[usize]) -> (Vec<Vector>, Vec<Vec<Vector>>) {
        let n = context.len();
        let max_len = self.cfg.max_len;
        let mut x: Vec<Vector> = context
            .iter()
            .enumerate()
            .map(|(i, &item)| {
                add(
                    &row(&self.p.item_embeddings, item),
                    &row(&self.p.positions, max_len - n + i),
                )
            })
            .collect();
        let mut layer_inputs = Vec::new();
        for l in 0..self.cfg.layers {
            let lp = &self.p.layers[l];
            let a: Vec<Vector> = x.iter().map(|r| self.ln1(l, r)).collect();
            let k: Vec<Vector> = a.iter().map(|r| linear(r, &lp.wk)).collect();
            let v: Vec<Vector> = a.iter().map(|r| linear(r, &lp.wv)).collect();
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                let q = linear(&a[i], &lp.wq);
                let att = attend(&q, &k[..=i], &v[..=i], self.cfg.heads);
                next.push(self.finish_layer(l, &x[i], &att));
            }
            layer_inputs.push(a);
            x = next;
        }
        (x.iter().map(|r| self.final_norm(r)).collect(), layer_inputs)
    }

    /// One reasoning step computed from scratch: the context is re-encoded
    /// and every earlier state's keys are rebuilt.
    pub fn step_from_scratch(
        &self,
        context: &[usize],
        prev: &[f64],
        history: &[Vector],
        t: usize,
    ) -> Vector {
        let (_, layer_inputs) = self.encode(context);
        let mut x = add(prev, &row(&self.p.rpe, t - 1));
        for l in 0..self.cfg.layers {
            let lp = &self.p.layers[l];
            let a = self.ln1(l, &x);
            let q = linear(&a, &lp.wq);
            let mut keys: Vec<Vector> = layer_inputs[l].iter().map(|r| linear(r, &lp.wk)).collect();
            let mut values: Vec<Vector> =
                layer_inputs[l].iter().map(|r| linear(r, &lp.wv)).collect();
            for h in history {
                let ah = self.ln1(l, h);
                keys.push(linear(&ah, &lp.wk));
                values.push(linear(&ah, &lp.wv));
            }
            let att = attend(&q, &keys, &values, self.cfg.heads);
            x = self.finish_layer(l, &x, &att);
        }
        self.final_norm(&x)
    }

    pub fn forward(&self, context: &[usize]) -> RefOutput {
        let context = &context[context.len().saturating_sub(self.cfg.max_len)..];
        let (enc, _) = self.encode(context);
        let h0 = enc.last().unwrap().clone();
        let (m_count, t_count) = (self.cfg.streams, self.cfg.steps);
        let mut states = Vec::with_capacity(m_count);
        for m in 0..m_count {
            let mut prev = add(&h0, &row(&self.p.triggers, m));
            let mut hist: Vec<Vector> = Vec::new();
            for t in 1..=t_count {
                let h = self.step_from_scratch(context, &prev, &hist, t);
                hist.push(h.clone());
                prev = h;
            }
            states.push(hist);
        }
        let pooled: Vec<Vector> = states
            .iter()
            .map(|s| {
                let mut z = vec![0.0; h0.len()];
                for h in s {
                    z = add(&z, h);
                }
                z.iter().map(|v| v / t_count as f64).collect()
            })
            .collect();
        let gate = if self.cfg.mors_enabled {
            let logits: Vector = (0..m_count)
                .map(|m| dot(&h0, self.p.gate_w.row(m)) + self.p.gate_b.data()[m])
                .collect();
            softmax(&logits)
        } else {
            vec![1.0 / m_count as f64; m_count]
        };
        let mut z_rea = vec![0.0; h0.len()];
        for (g, z) in gate.iter().zip(&pooled) {
            for (a, b) in z_rea.iter_mut().zip(z) {
                *a += g * b;
            }
        }
        let z_infer = add(&h0, &z_rea);
        let score = |z: &[f64]| -> Vector {
            (0..self.cfg.vocab_size)
                .map(|v| dot(z, self.p.item_embeddings.row(v)))
                .collect()
        };
        RefOutput {
            train_logits: score(&z_rea),
            infer_logits: score(&z_infer),
            h0,
            states,
            pooled,
            gate,
            z_rea,
            z_infer,
        }
    }
}

/// Depth-only recurrent reasoning baseline written directly: the encoder
/// state is refined for `T` steps, each step attending to the context and
/// the earlier steps, and the steps are averaged.
pub fn depth_only_reference(
    p: &PlrParams<f64>,
    cfg: &PlrConfig,
    context: &[usize],
) -> (Vector, Vector) {
    let r = Reference { p, cfg };
    let context = &context[context.len().saturating_sub(cfg.max_len)..];
    let (enc, _) = r.encode(context);
    let mut state = enc.last().unwrap().clone();
    let mut steps: Vec<Vector> = Vec::new();
    for t in 1..=cfg.steps {
        state = r.step_from_scratch(context, &state, &steps, t);
        steps.push(state.clone());
    }
    let z: Vector = (0..state.len())
        .map(|j| steps.iter().map(|s| s[j]).sum::<f64>() / cfg.steps as f64)
        .collect();
    let logits = (0..cfg.vocab_size)
        .map(|v| dot(&z, p.item_embeddings.row(v)))
        .collect();
    (z, logits)
}

/// `−log softmax(logits)[target]`
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    -softmax(logits)[target].ln()
}

pub fn random_contexts(
    rng: &mut RngStream,
    batch: usize,
    max_len: usize,
    vocab: usize,
) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|_| {
            let n = 1 + rng.below(max_len);
            (0..n).map(|_| rng.below(vocab)).collect()
        })
        .collect()
}

/// Small random configuration with the given stream and step counts.
pub fn small_config(rng: &mut RngStream, streams: usize, steps: usize) -> PlrConfig {
    let heads = 1 + rng.below(2);
    PlrConfig {
        d: 8 * heads,
        heads,
        layers: 1 + rng.below(2),
        steps,
        streams,
        max_len: 6,
        vocab_size: 12,
        dropout_rep: 0.0,
        dropout_attn: 0.0,
        mors_enabled: rng.uniform() < 0.8,
        ..Default::default()
    }
}

/// Parameters with larger-than-default scale so that every path carries
/// signal worth comparing.
pub fn random_params(cfg: &PlrConfig, seed: u64, scale: f64) -> PlrParams<f64> {
    let mut p = PlrParams::<f64>::init(cfg, seed).unwrap();
    let mut rng = RngStream::new(seed ^ 0xABCD);
    for t in p.flat_mut() {
        for v in t.data_mut() {
            *v += scale * rng.normal();
        }
    }
    p
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
