use serde::{Deserialize, Serialize};

use super::PlrConfig;
use crate::error::{PlrError, Result};
use crate::tensor::{Float, RngStream, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

/// One shared transformer layer. Attention projections carry no bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<X> {
    pub ln1_gain: X,
    pub ln1_bias: X,
    pub wq: X,
    pub wk: X,
    pub wv: X,
    pub wo: X,
    pub ln2_gain: X,
    pub ln2_bias: X,
    pub w1: X,
    pub b1: X,
    pub w2: X,
    pub b2: X,
}

/// Every learnable tensor, generic over the leaf so the same layout serves
/// stored parameters (`Tensor`) and tape handles (`Var`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTree<X> {
    pub item_embeddings: X,
    pub positions: X,
    pub layers: Vec<LayerParams<X>>,
    pub final_gain: X,
    pub final_bias: X,
    /// Reasoning position embeddings, one row per step.
    pub rpe: X,
    /// One trigger token per stream.
    pub triggers: X,
    pub gate_w: X,
    pub gate_b: X,
}

pub type PlrParams<T> = ParamTree<Tensor<T>>;
pub type ParamVars<'t, T> = ParamTree<Var<'t, T>>;

const LAYER_FIELDS: [&str; 12] = [
    "ln1.gain", "ln1.bias", "wq", "wk", "wv", "wo", "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1",
    "ffn.w2", "ffn.b2",
];

impl<X> ParamTree<X> {
    /// Canonical names and shapes, in storage order.
    pub fn layout(config: &PlrConfig) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (config.d, config.ffn_dim());
        let mut out = vec![
            ("item_embeddings".to_string(), vec![config.vocab_size, d]),
            ("positions".to_string(), vec![config.max_len, d]),
        ];
        for l in 0..config.layers {
            let shapes = [
                vec![d],
                vec![d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
            ];
            for (name, shape) in LAYER_FIELDS.iter().zip(shapes) {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.extend([
            ("final.gain".to_string(), vec![d]),
            ("final.bias".to_string(), vec![d]),
            ("rpe".to_string(), vec![config.steps, d]),
            ("triggers".to_string(), vec![config.streams, d]),
            ("gate.w".to_string(), vec![config.streams, d]),
            ("gate.b".to_string(), vec![config.streams]),
        ]);
        out
    }

    pub fn flat(&self) -> Vec<&X> {
        let mut out = vec![&self.item_embeddings, &self.positions];
        for l in &self.layers {
            out.extend([
                &l.ln1_gain,
                &l.ln1_bias,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ln2_gain,
                &l.ln2_bias,
                &l.w1,
                &l.b1,
                &l.w2,
                &l.b2,
            ]);
        }
        out.extend([
            &self.final_gain,
            &self.final_bias,
            &self.rpe,
            &self.triggers,
            &self.gate_w,
            &self.gate_b,
        ]);
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut X> {
        let mut out = vec![&mut self.item_embeddings, &mut self.positions];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.rpe,
            &mut self.triggers,
            &mut self.gate_w,
            &mut self.gate_b,
        ]);
        out
    }

    /// Inverse of `flat`.
    pub fn from_flat(layers: usize, values: Vec<X>) -> Result<Self> {
        let expected = 2 + 12 * layers + 6;
        if values.len() != expected {
            return Err(PlrError::Input(format!(
                "{} parameter tensors given, layout has {expected}",
                values.len()
            )));
        }
        let mut it = values.into_iter();
        let mut next = || it.next().unwrap();
        let item_embeddings = next();
        let positions = next();
        let layers = (0..layers)
            .map(|_| LayerParams {
                ln1_gain: next(),
                ln1_bias: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        Ok(Self {
            item_embeddings,
            positions,
            layers,
            final_gain: next(),
            final_bias: next(),
            rpe: next(),
            triggers: next(),
            gate_w: next(),
            gate_b: next(),
        })
    }

    pub fn map<Y>(&self, mut f: impl FnMut(&X) -> Y) -> ParamTree<Y> {
        let values = self.flat().into_iter().map(&mut f).collect();
        ParamTree::from_flat(self.layers.len(), values).expect("same layout")
    }
}

fn is_gain(name: &str) -> bool {
    name.ends_with("gain")
}

fn is_bias(name: &str) -> bool {
    name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") || name == "gate.b"
}

impl<T: Float> PlrParams<T> {
    /// Truncated-normal weights and embeddings, unit gains, zero biases.
    pub fn init_with(config: &PlrConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let values = Self::layout(config)
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                let data: Vec<T> = if is_gain(&name) {
                    vec![T::one(); len]
                } else if is_bias(&name) {
                    vec![T::zero(); len]
                } else {
                    (0..len)
                        .map(|_| T::lit(rng.truncated_normal(INIT_STD)))
                        .collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_flat(config.layers, values)
    }

    pub fn init(config: &PlrConfig, seed: u64) -> Result<Self> {
        Self::init_with(
            config,
            &mut RngStream::new(seed).split(crate::streams::INIT),
        )
    }

    /// All tensors set to zero (gains included).
    pub fn zeros(config: &PlrConfig) -> Self {
        let values = Self::layout(config)
            .into_iter()
            .map(|(_, shape)| Tensor::zeros(&shape))
            .collect();
        Self::from_flat(config.layers, values).expect("layout")
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["item_embeddings".to_string(), "positions".to_string()];
        for l in 0..self.layers.len() {
            out.extend(LAYER_FIELDS.iter().map(|f| format!("layers.{l}.{f}")));
        }
        out.extend(
            [
                "final.gain",
                "final.bias",
                "rpe",
                "triggers",
                "gate.w",
                "gate.b",
            ]
            .map(String::from),
        );
        out
    }

    pub fn check_shapes(&self, config: &PlrConfig) -> Result<()> {
        let layout = Self::layout(config);
        let flat = self.flat();
        if layout.len() != flat.len() {
            return Err(PlrError::Input(format!(
                "parameters have {} tensors, configuration expects {}",
                flat.len(),
                layout.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(flat) {
            if t.shape() != shape.as_slice() {
                return Err(PlrError::CheckpointShape {
                    name: name.clone(),
                    found: t.shape().to_vec(),
                    expected: shape.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> PlrParams<U> {
        self.map(Tensor::cast)
    }

    pub fn num_scalars(&self) -> usize {
        self.flat().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|t| t.is_finite())
    }

    pub fn to_tape<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> ParamVars<'t, T> {
        self.map(|t| tape.leaf(t.clone(), requires_grad))
    }
}

impl<'t, T: Float> ParamVars<'t, T> {
    /// Gradients in `flat` order; parameters the loss never reached get zeros.
    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.flat()
            .into_iter()
            .map(|v| {
                v.tape()
                    .grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
            })
            .collect()
    }
}
