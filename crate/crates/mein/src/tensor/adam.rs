//! Adam with bias correction and a per-step multiplicative learning-rate
//! decay: effective lr at step t is `base_lr * decay^t`.

use super::{Tensor, TensorError};

pub struct Adam {
    base_lr: f32,
    decay: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    grad_clip: Option<f32>,
    t: u64,
    slots: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(base_lr: f32, decay: f32) -> Self {
        Adam {
            base_lr,
            decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            t: 0,
            slots: Vec::new(),
        }
    }

    /// Enable global-norm gradient clipping. Off by default.
    pub fn with_grad_clip(mut self, max_norm: f32) -> Self {
        if max_norm > 0.0 {
            self.grad_clip = Some(max_norm);
        }
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Learning rate the next call to [`Adam::step`] will use.
    pub fn effective_lr(&self) -> f32 {
        (self.base_lr as f64 * (self.decay as f64).powi(self.t as i32)) as f32
    }

    /// Apply one update. `params` and `grads` are parallel slices; moment
    /// buffers are allocated on first use and must keep matching shapes
    /// afterwards.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Vec<f32>],
    ) -> Result<(), TensorError> {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
                .collect();
        }
        assert_eq!(self.slots.len(), params.len(), "optimizer slot mismatch");

        let clip_scale = match self.grad_clip {
            Some(max_norm) => {
                let sq: f64 = grads
                    .iter()
                    .flat_map(|g| g.iter())
                    .map(|&v| (v as f64) * (v as f64))
                    .sum();
                let norm = sq.sqrt() as f32;
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        let lr = self.effective_lr();
        let step_no = (self.t + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(step_no);
        let bc2 = 1.0 - self.beta2.powi(step_no);

        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.slots.iter_mut()) {
            if g.len() != p.len() {
                return Err(TensorError::BadData {
                    len: g.len(),
                    shape: p.shape().to_vec(),
                });
            }
            let data = p.data_mut();
            for k in 0..g.len() {
                let gk = g[k] * clip_scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                data[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        self.t += 1;
        Ok(())
    }
}
