//! Adam with optional global-norm clipping.

use crate::error::{PlrError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the full gradient when its L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, epsilon: f64, clip_norm: Option<f64>) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            epsilon,
            clip_norm,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Moments are kept in f64 so long runs do not
    /// drift with the parameter precision.
    pub fn update(&mut self, params: Vec<&mut Tensor<f32>>, grads: &[Tensor<f32>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(PlrError::State(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        let mut scale = 1.0;
        if let Some(c) = self.clip_norm {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            if norm > c {
                scale = c / norm;
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(PlrError::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj as f64 * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let step = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.epsilon);
                *w = (*w as f64 - step) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // After bias correction the first update is lr · sign(g).
        let mut p = Tensor::vector(vec![1.0f32, -2.0]);
        let g = Tensor::vector(vec![0.3f32, -40.0]);
        let mut opt = Adam::new(0.01, 0.9, 0.999, 1e-8, None);
        opt.update(vec![&mut p], &[g]).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-6);
        assert!((p.data()[1] + 1.99).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::vector(vec![3.0f32, -1.5]);
        let mut opt = Adam::new(0.05, 0.9, 0.999, 1e-8, Some(5.0));
        for _ in 0..2000 {
            let g = Tensor::vector(p.data().iter().map(|x| 2.0 * x).collect());
            opt.update(vec![&mut p], &[g]).unwrap();
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-2), "{:?}", p.data());
    }

    #[test]
    fn clipping_rescales_large_gradients() {
        // Clipped to norm 1, gradients 100 then 1 both become 1, so each
        // bias-corrected step is exactly lr.
        let mut a = Tensor::vector(vec![0.0f32]);
        let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8, Some(1.0));
        for g in [100.0, 1.0] {
            opt.update(vec![&mut a], &[Tensor::vector(vec![g])])
                .unwrap();
        }
        assert!((a.data()[0] + 0.2).abs() < 1e-5);
        let mut b = Tensor::vector(vec![0.0f32]);
        let mut plain = Adam::new(0.1, 0.9, 0.999, 1e-8, None);
        for g in [100.0, 1.0] {
            plain
                .update(vec![&mut b], &[Tensor::vector(vec![g])])
                .unwrap();
        }
        assert!((b.data()[0] + 0.2).abs() > 1e-2);
    }

    #[test]
    fn mismatched_lists_rejected() {
        let mut p = Tensor::vector(vec![0.0f32]);
        let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8, None);
        assert!(opt.update(vec![&mut p], &[]).is_err());
    }
}
