use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// AdamW with bias correction and a cosine learning-rate decay over a fixed
/// number of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(base_lr: f64, weight_decay: f64, total_steps: usize, group_sizes: &[usize]) -> Self {
        Self {
            base_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            total_steps: total_steps.max(1),
            step: 0,
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// `base_lr · ½(1 + cos(π·step/total))`; strictly positive for `step < total`.
    pub fn lr(&self) -> f64 {
        let progress = (self.step.min(self.total_steps - 1)) as f64 / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }

    pub fn moments_finite(&self) -> bool {
        self.m.iter().chain(&self.v).all(|g| g.iter().all(|x| x.is_finite()))
    }

    /// One update of every parameter group; returns the learning rate used.
    pub fn optimiser_step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Length {
                op: "optimiser_step groups",
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Length {
                    op: "optimiser_step group size",
                    expected: self.m[i].len(),
                    got: p.len().min(g.len()),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient group {i}"),
                });
            }
        }
        let lr = self.lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pj, &gj), mj), vj) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *pj -= lr * self.weight_decay * *pj;
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *pj -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        self.step += 1;
        Ok(lr)
    }
}
