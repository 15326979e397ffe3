use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use crate::consolidation::{aux_logit_grads, aux_loss, total_loss, ConsolidationState};
use crate::error::Result;
use crate::moe::grad::{adapter_backward, head_backward, router_logit_backward, Gradients};
use crate::moe::{CpBias, ForwardCtx, Model, RoutingDecision};
use crate::taskgen::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub task: f64,
    pub reg: f64,
    pub aux: f64,
}

/// Result of evaluating the training objective on one batch.
#[derive(Debug, Clone)]
pub struct Objective {
    pub terms: LossTerms,
    pub grads: Option<Gradients>,
    pub decisions: Vec<RoutingDecision>,
}

/// `L_task + λ·L_reg + γ·L_aux` on `batch`, optionally with its gradient
/// with respect to every expert factor and the router.
///
/// `masks`, when given, holds one dropout mask per sample.
#[allow(clippy::too_many_arguments)]
pub fn objective<S: Borrow<Sample>>(
    model: &Model,
    batch: &[S],
    bias: Option<CpBias<'_>>,
    masks: Option<&[Vec<f64>]>,
    consolidation: &ConsolidationState,
    lambda: f64,
    gamma: f64,
    with_grad: bool,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(crate::error::Error::Empty("objective batch"));
    }
    let w = 1.0 / batch.len() as f64;
    let mut grads = with_grad.then(|| Gradients::zeros_like(&model.layer));
    let mut task = 0.0;
    let mut decisions = Vec::with_capacity(batch.len());
    let mut inputs: Vec<&[f64]> = Vec::with_capacity(batch.len());
    for (k, s) in batch.iter().enumerate() {
        let s = s.borrow();
        let ctx = ForwardCtx {
            bias,
            transient: None,
            dropout_mask: masks.map(|m| m[k].as_slice()),
        };
        let trace = model.forward(&s.x, &ctx)?;
        let (loss, dz) = head_backward(&model.backbone, &trace, s.label)?;
        task += w * loss;
        if let Some(g) = grads.as_mut() {
            adapter_backward(&model.layer, &trace, &dz, w, g);
        }
        decisions.push(trace.routing);
        inputs.push(&s.x);
    }
    let aux = aux_loss(&decisions)?;
    let reg = consolidation.reg_loss(&model.layer)?;
    let total = total_loss(task, reg, aux, lambda, gamma)?;
    if let Some(g) = grads.as_mut() {
        if gamma != 0.0 {
            for (x, ds) in inputs.iter().zip(aux_logit_grads(&decisions)?) {
                router_logit_backward(x, &ds, gamma, g);
            }
        }
        if lambda != 0.0 {
            consolidation.reg_grad(&model.layer, lambda, g)?;
        }
    }
    Ok(Objective {
        terms: LossTerms { total, task, reg, aux },
        grads,
        decisions,
    })
}
