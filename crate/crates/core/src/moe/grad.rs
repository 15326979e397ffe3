//! Hand-derived reverse pass through the adapted model.
//!
//! The top-K selection is treated as a constant; gradients flow through the
//! renormalised softmax over the selected experts.

use super::{FrozenBackbone, MoeLayer, Trace};
use crate::error::Result;
use crate::numerics::{softmax, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGrad {
    pub a: Matrix,
    pub b: Matrix,
}

/// Gradient with respect to every stable adapter parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub experts: Vec<ExpertGrad>,
    pub w_gate: Matrix,
}

impl Gradients {
    pub fn zeros_like(layer: &MoeLayer) -> Self {
        Self {
            experts: layer
                .experts
                .iter()
                .map(|e| ExpertGrad {
                    a: Matrix::zeros(e.a.rows(), e.a.cols()),
                    b: Matrix::zeros(e.b.rows(), e.b.cols()),
                })
                .collect(),
            w_gate: Matrix::zeros(layer.router.w_gate.rows(), layer.router.w_gate.cols()),
        }
    }

    /// Parameter-group slices in canonical order: `A_0, B_0, …, A_{n−1}, B_{n−1}, W_gate`.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.experts.len() + 1);
        for e in &self.experts {
            out.push(e.a.data());
            out.push(e.b.data());
        }
        out.push(self.w_gate.data());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn add_scaled(&mut self, scale: f64, other: &Gradients) -> Result<()> {
        for (a, b) in self.experts.iter_mut().zip(&other.experts) {
            a.a.add_scaled(scale, &b.a)?;
            a.b.add_scaled(scale, &b.b)?;
        }
        self.w_gate.add_scaled(scale, &other.w_gate)
    }
}

impl MoeLayer {
    /// Mutable parameter slices, same order as [`Gradients::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.experts.len() + 1);
        for e in &mut self.experts {
            out.push(e.a.data_mut());
            out.push(e.b.data_mut());
        }
        out.push(self.router.w_gate.data_mut());
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.experts.len() + 1);
        for e in &self.experts {
            out.push(e.a.data());
            out.push(e.b.data());
        }
        out.push(self.router.w_gate.data());
        out
    }
}

/// Cross-entropy loss at `trace` and its gradient with respect to the
/// adapted block output `z`.
pub fn head_backward(backbone: &FrozenBackbone, trace: &Trace, label: usize) -> Result<(f64, Vec<f64>)> {
    let loss = super::cross_entropy(&trace.logits, label)?;
    let mut d_logits = softmax(&trace.logits)?;
    d_logits[label] -= 1.0;
    let d_act = backbone.w2().matvec_t(&d_logits)?;
    let dz = d_act
        .iter()
        .zip(&trace.activation)
        .map(|(d, a)| d * (1.0 - a * a))
        .collect();
    Ok((loss, dz))
}

/// Accumulates `weight · ∂L/∂θ` into `grads` given `dz = ∂L/∂z` for one
/// sample, and returns `∂L/∂s` for the router logits (unweighted).
pub fn adapter_backward(layer: &MoeLayer, trace: &Trace, dz: &[f64], weight: f64, grads: &mut Gradients) -> Vec<f64> {
    let c = layer.expert_scale();
    let routing = &trace.routing;
    let n = layer.n_experts();
    let mut d_gate = vec![0.0; n];
    for (&i, (u, e)) in routing.selected.iter().zip(&trace.expert_parts) {
        let g = routing.weights[i];
        let expert = &layer.experts[i];
        // ∂L/∂e_i = c·g_i·dz
        let de: Vec<f64> = dz.iter().map(|v| c * g * v).collect();
        grads.experts[i].b.add_outer(weight, &de, u);
        let du = expert.b.matvec_t(&de).expect("shape checked in forward");
        grads.experts[i].a.add_outer(weight, &du, &trace.x_expert);
        d_gate[i] = c * dz.iter().zip(e).map(|(a, b)| a * b).sum::<f64>();
    }
    let mean: f64 = routing.selected.iter().map(|&i| routing.weights[i] * d_gate[i]).sum();
    let mut ds = vec![0.0; n];
    for &i in &routing.selected {
        ds[i] = routing.weights[i] * (d_gate[i] - mean);
    }
    grads.w_gate.add_outer(weight, &trace.x, &ds);
    ds
}

/// Adds `weight · x ⊗ ds` to the router gradient for extra logit-space terms.
pub fn router_logit_backward(x: &[f64], ds: &[f64], weight: f64, grads: &mut Gradients) {
    grads.w_gate.add_outer(weight, x, ds);
}
