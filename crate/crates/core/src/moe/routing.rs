use serde::{Deserialize, Serialize};

use super::{CpBias, Router};
use crate::error::{Error, Result};
use crate::numerics::softmax;

/// Routing outcome for one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// `s = xᵀ W_gate`
    pub native_logits: Vec<f64>,
    /// `softmax(s)`, never biased.
    pub native_probs: Vec<f64>,
    /// `s + α·h`
    pub biased_logits: Vec<f64>,
    /// Top-K indices by biased logit, descending, lowest index first on ties.
    pub selected: Vec<usize>,
    /// Length `n`; renormalised softmax over `selected`, exactly zero elsewhere.
    pub weights: Vec<f64>,
}

pub fn native_logits_and_probs(router: &Router, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = router.w_gate.matvec_t(x)?;
    let p = softmax(&s)?;
    Ok((s, p))
}

/// `s̃_i = s_i + α·h_i`
pub fn apply_cp_bias(s: &[f64], h: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if s.len() != h.len() {
        return Err(Error::Length {
            op: "apply_cp_bias",
            expected: s.len(),
            got: h.len(),
        });
    }
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::invalid(format!("cp bias strength {alpha} is negative")));
    }
    Ok(s.iter().zip(h).map(|(si, hi)| si + alpha * hi).collect())
}

/// Selects the `k` largest logits and renormalises their softmax.
///
/// Returns `(selected, weights)` with `weights.len() == logits.len()`.
pub fn route_topk(logits: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = logits.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("top-k: k = {k} with {n} experts")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps lower indices ahead on ties.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    order.truncate(k);
    let chosen: Vec<f64> = order.iter().map(|&i| logits[i]).collect();
    let p = softmax(&chosen)?;
    let mut weights = vec![0.0; n];
    for (&i, w) in order.iter().zip(p) {
        weights[i] = w;
    }
    Ok((order, weights))
}

/// Full routing for one token.
pub fn route(router: &Router, x: &[f64], bias: Option<CpBias<'_>>, k: usize) -> Result<RoutingDecision> {
    let (native_logits, native_probs) = native_logits_and_probs(router, x)?;
    let biased_logits = match bias {
        Some(b) => apply_cp_bias(&native_logits, b.h, b.alpha)?,
        None => native_logits.clone(),
    };
    let (selected, weights) = route_topk(&biased_logits, k)?;
    Ok(RoutingDecision {
        native_logits,
        native_probs,
        biased_logits,
        selected,
        weights,
    })
}
