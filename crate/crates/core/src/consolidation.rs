//! Importance accumulation, parameter snapshots, the protected-update
//! regulariser, the load-balancing loss and the combined objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::grad::Gradients;
use crate::moe::{LoraExpert, MoeLayer, RoutingDecision};
use crate::numerics::Matrix;
use crate::probe::{ConsistencyScores, ImportanceMask};

/// Slack allowed above 1 on consistency scores.
const SCORE_SLACK: f64 = 1e-9;

/// Accumulated importance and last-task snapshot of one stable expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertMemory {
    pub omega_a: Matrix,
    pub omega_b: Matrix,
    pub a_old: Option<Matrix>,
    pub b_old: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationState {
    pub experts: Vec<ExpertMemory>,
    /// Number of completed snapshots.
    pub task_index: usize,
}

impl ConsolidationState {
    pub fn new(layer: &MoeLayer) -> Self {
        Self {
            experts: layer
                .experts
                .iter()
                .map(|e| ExpertMemory {
                    omega_a: Matrix::zeros(e.a.rows(), e.a.cols()),
                    omega_b: Matrix::zeros(e.b.rows(), e.b.cols()),
                    a_old: None,
                    b_old: None,
                })
                .collect(),
            task_index: 0,
        }
    }

    /// `Ω_total⁽ⁱ⁾ += h_i · Ω_t` for both factors of every expert.
    pub fn accumulate_importance(&mut self, omega: &ImportanceMask, h: &ConsistencyScores) -> Result<()> {
        if h.len() != self.experts.len() {
            return Err(Error::Length {
                op: "accumulate_importance",
                expected: self.experts.len(),
                got: h.len(),
            });
        }
        if let Some(bad) = h.h.iter().find(|&&v| !(0.0..=1.0 + SCORE_SLACK).contains(&v)) {
            return Err(Error::invalid(format!("consistency score {bad} outside [0, 1]")));
        }
        for mem in &self.experts {
            for (total, new) in [(&mem.omega_a, &omega.omega_a), (&mem.omega_b, &omega.omega_b)] {
                if total.shape() != new.shape() {
                    return Err(Error::Shape {
                        op: "accumulate_importance",
                        left: total.shape(),
                        right: new.shape(),
                    });
                }
            }
        }
        for (mem, &hi) in self.experts.iter_mut().zip(&h.h) {
            mem.omega_a.add_scaled(hi, &omega.omega_a)?;
            mem.omega_b.add_scaled(hi, &omega.omega_b)?;
        }
        Ok(())
    }

    /// Replaces the snapshots with deep copies of the current experts.
    pub fn snapshot_experts(&mut self, layer: &MoeLayer) {
        for (mem, e) in self.experts.iter_mut().zip(&layer.experts) {
            mem.a_old = Some(e.a.clone());
            mem.b_old = Some(e.b.clone());
        }
        self.task_index += 1;
    }

    /// `Σ_i ⟨Ω_A⁽ⁱ⁾, (A_i − A_i^old)^⊙2⟩ + ⟨Ω_B⁽ⁱ⁾, (B_i − B_i^old)^⊙2⟩`.
    pub fn reg_loss(&self, layer: &MoeLayer) -> Result<f64> {
        self.check_layer(layer)?;
        let mut total = 0.0;
        for (i, (mem, e)) in self.experts.iter().zip(&layer.experts).enumerate() {
            total += weighted_sq_dev(&mem.omega_a, &e.a, mem.a_old.as_ref(), i)?;
            total += weighted_sq_dev(&mem.omega_b, &e.b, mem.b_old.as_ref(), i)?;
        }
        Ok(total)
    }

    /// Adds `weight · 2Ω ⊙ (θ − θ_old)` to the expert gradients.
    pub fn reg_grad(&self, layer: &MoeLayer, weight: f64, grads: &mut Gradients) -> Result<()> {
        self.check_layer(layer)?;
        for (i, (mem, e)) in self.experts.iter().zip(&layer.experts).enumerate() {
            add_reg_grad(
                &mem.omega_a,
                &e.a,
                mem.a_old.as_ref(),
                weight,
                &mut grads.experts[i].a,
                i,
            )?;
            add_reg_grad(
                &mem.omega_b,
                &e.b,
                mem.b_old.as_ref(),
                weight,
                &mut grads.experts[i].b,
                i,
            )?;
        }
        Ok(())
    }

    fn check_layer(&self, layer: &MoeLayer) -> Result<()> {
        if layer.experts.len() != self.experts.len() {
            return Err(Error::Length {
                op: "consolidation state",
                expected: self.experts.len(),
                got: layer.experts.len(),
            });
        }
        Ok(())
    }

    pub fn omega_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.experts
            .iter()
            .flat_map(|m| m.omega_a.data().iter().chain(m.omega_b.data()))
            .copied()
    }
}

fn weighted_sq_dev(omega: &Matrix, cur: &Matrix, old: Option<&Matrix>, expert: usize) -> Result<f64> {
    let Some(old) = old else {
        if omega.is_zero() {
            return Ok(0.0);
        }
        return Err(Error::invalid(format!(
            "expert {expert} has accumulated importance but no snapshot"
        )));
    };
    if cur.shape() != old.shape() || omega.shape() != cur.shape() {
        return Err(Error::Shape {
            op: "reg_loss",
            left: cur.shape(),
            right: old.shape(),
        });
    }
    Ok(omega
        .data()
        .iter()
        .zip(cur.data().iter().zip(old.data()))
        .map(|(&w, (&c, &o))| w * (c - o) * (c - o))
        .sum())
}

fn add_reg_grad(
    omega: &Matrix,
    cur: &Matrix,
    old: Option<&Matrix>,
    weight: f64,
    out: &mut Matrix,
    expert: usize,
) -> Result<()> {
    let Some(old) = old else {
        if omega.is_zero() {
            return Ok(());
        }
        return Err(Error::invalid(format!(
            "expert {expert} has accumulated importance but no snapshot"
        )));
    };
    for ((g, &w), (&c, &o)) in out
        .data_mut()
        .iter_mut()
        .zip(omega.data())
        .zip(cur.data().iter().zip(old.data()))
    {
        *g += weight * 2.0 * w * (c - o);
    }
    Ok(())
}

/// Free-function form of [`ConsolidationState::reg_loss`] over an expert list.
pub fn reg_loss(state: &ConsolidationState, experts: &[LoraExpert]) -> Result<f64> {
    let mut total = 0.0;
    for (i, (mem, e)) in state.experts.iter().zip(experts).enumerate() {
        total += weighted_sq_dev(&mem.omega_a, &e.a, mem.a_old.as_ref(), i)?;
        total += weighted_sq_dev(&mem.omega_b, &e.b, mem.b_old.as_ref(), i)?;
    }
    Ok(total)
}

/// Per-expert dispatch fraction `f_i` and mean native probability `P_i`.
fn load_stats(decisions: &[RoutingDecision]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = decisions.first().ok_or(Error::Empty("aux_loss"))?;
    let n = first.native_probs.len();
    let t = decisions.len() as f64;
    let mut f = vec![0.0; n];
    let mut p = vec![0.0; n];
    for d in decisions {
        if d.native_probs.len() != n {
            return Err(Error::Length {
                op: "aux_loss",
                expected: n,
                got: d.native_probs.len(),
            });
        }
        for &i in &d.selected {
            f[i] += 1.0;
        }
        for (acc, &pi) in p.iter_mut().zip(&d.native_probs) {
            *acc += pi;
        }
    }
    for v in f.iter_mut().chain(p.iter_mut()) {
        *v /= t;
    }
    Ok((f, p))
}

/// `Σ_i f_i·P_i`, from unbiased router probabilities only.
pub fn aux_loss(decisions: &[RoutingDecision]) -> Result<f64> {
    let (f, p) = load_stats(decisions)?;
    Ok(f.iter().zip(&p).map(|(a, b)| a * b).sum())
}

/// `∂L_aux/∂s_t` for each token's native logits, with `f` held constant.
pub fn aux_logit_grads(decisions: &[RoutingDecision]) -> Result<Vec<Vec<f64>>> {
    let (f, _) = load_stats(decisions)?;
    let t = decisions.len() as f64;
    Ok(decisions
        .iter()
        .map(|d| {
            let fp: f64 = f.iter().zip(&d.native_probs).map(|(a, b)| a * b).sum();
            d.native_probs
                .iter()
                .zip(&f)
                .map(|(&pj, &fj)| pj * (fj - fp) / t)
                .collect()
        })
        .collect())
}

/// `L_task + λ·L_reg + γ·L_aux`.
pub fn total_loss(task: f64, reg: f64, aux: f64, lambda: f64, gamma: f64) -> Result<f64> {
    for (name, v) in [
        ("task", task),
        ("reg", reg),
        ("aux", aux),
        ("lambda", lambda),
        ("gamma", gamma),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("total_loss input `{name}` = {v}"),
            });
        }
    }
    Ok(task + lambda * reg + gamma * aux)
}

#[cfg(test)]
mod tests;
