//! Transient-expert probing.
//!
//! At the start of a task a throwaway adapter is trained with plain gradient
//! descent while everything else stays fixed. Its trajectory yields a
//! path-integral importance mask, and the alignment between its outputs and
//! each stable expert's outputs yields the consistency scores.

use std::borrow::Borrow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::grad::head_backward;
use crate::moe::{ForwardCtx, LoraExpert, Model};
use crate::numerics::{center_columns, matmul, Matrix};
use crate::taskgen::Sample;

/// A disposable adapter with the same shape as one stable expert.
#[derive(Debug, Clone, PartialEq)]
pub struct TransientExpert {
    pub expert: LoraExpert,
}

impl TransientExpert {
    /// Fresh probe: random `A`, zero `B`, so `E_TE(x) = 0` everywhere.
    pub fn init(model: &Model, rng: &mut impl Rng) -> Self {
        let c = &model.config;
        Self {
            expert: LoraExpert::init(c.d_in, c.d_hidden, c.expert_rank, rng),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.expert.forward(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmupStep {
    pub loss: f64,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

/// Path-integral bookkeeping for one warm-up.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupTrajectory {
    /// Parameters before the first step.
    pub phi_0: LoraExpert,
    /// `ω = Σ_s −g_s ⊙ Δφ_s`, split by factor.
    pub omega_a: Matrix,
    pub omega_b: Matrix,
    pub steps_taken: usize,
    pub eta: f64,
    /// Per-step loss and gradient, in order.
    pub steps: Vec<WarmupStep>,
}

/// Prospective importance, one entry per transient parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMask {
    pub omega_a: Matrix,
    pub omega_b: Matrix,
}

impl ImportanceMask {
    pub fn zeros_like(expert: &LoraExpert) -> Self {
        Self {
            omega_a: Matrix::zeros(expert.a.rows(), expert.a.cols()),
            omega_b: Matrix::zeros(expert.b.rows(), expert.b.cols()),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.omega_a.data().iter().chain(self.omega_b.data()).copied()
    }
}

/// One CKA score per stable expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScores {
    pub h: Vec<f64>,
}

impl ConsistencyScores {
    pub fn zeros(n: usize) -> Self {
        Self { h: vec![0.0; n] }
    }

    pub fn uniform(n: usize, value: f64) -> Self {
        Self { h: vec![value; n] }
    }

    pub fn mean(&self) -> f64 {
        if self.h.is_empty() {
            0.0
        } else {
            self.h.iter().sum::<f64>() / self.h.len() as f64
        }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

/// Raw (uncentred) outputs captured on the warm-up tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBuffer {
    /// `N × d_out`
    pub z_te: Matrix,
    /// One `N × d_out` matrix per stable expert.
    pub z_se: Vec<Matrix>,
}

impl ActivationBuffer {
    pub fn tokens(&self) -> usize {
        self.z_te.rows()
    }

    /// Evaluates the probe and every stable expert densely on `samples`,
    /// ignoring routing.
    pub fn capture<S: Borrow<Sample>>(model: &Model, te: &TransientExpert, samples: &[S]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::invalid(format!(
                "activation capture needs at least 2 tokens, got {}",
                samples.len()
            )));
        }
        let d_out = model.config.d_hidden;
        let n = samples.len();
        let mut z_te = Vec::with_capacity(n * d_out);
        let mut z_se: Vec<Vec<f64>> = vec![Vec::with_capacity(n * d_out); model.layer.n_experts()];
        for s in samples {
            let x = &s.borrow().x;
            z_te.extend(te.forward(x)?);
            for (buf, expert) in z_se.iter_mut().zip(&model.layer.experts) {
                buf.extend(expert.forward(x)?);
            }
        }
        Ok(Self {
            z_te: Matrix::from_vec(n, d_out, z_te)?,
            z_se: z_se
                .into_iter()
                .map(|d| Matrix::from_vec(n, d_out, d))
                .collect::<Result<_>>()?,
        })
    }
}

/// Mean task loss of `batch` with the probe attached, and its gradient with
/// respect to the probe's `(A, B)`. Stable routing runs without CP bias and
/// without dropout.
pub fn transient_loss_and_grad<S: Borrow<Sample>>(
    model: &Model,
    te: &TransientExpert,
    batch: &[S],
) -> Result<(f64, Matrix, Matrix)> {
    if batch.is_empty() {
        return Err(Error::Empty("transient_loss_and_grad"));
    }
    let ctx = ForwardCtx {
        bias: None,
        transient: Some(te),
        dropout_mask: None,
    };
    let c = model.layer.expert_scale();
    let w = 1.0 / batch.len() as f64;
    let mut ga = Matrix::zeros(te.expert.a.rows(), te.expert.a.cols());
    let mut gb = Matrix::zeros(te.expert.b.rows(), te.expert.b.cols());
    let mut loss = 0.0;
    for s in batch {
        let s = s.borrow();
        let trace = model.forward(&s.x, &ctx)?;
        let (l, dz) = head_backward(&model.backbone, &trace, s.label)?;
        loss += w * l;
        let (u, _) = trace.transient_parts.as_ref().expect("probe attached");
        let de: Vec<f64> = dz.iter().map(|v| c * v).collect();
        gb.add_outer(w, &de, u);
        let du = te.expert.b.matvec_t(&de)?;
        ga.add_outer(w, &du, &trace.x_expert);
    }
    Ok((loss, ga, gb))
}

/// Result of [`warmup_transient`].
#[derive(Debug, Clone)]
pub struct WarmupOutcome {
    pub transient: TransientExpert,
    pub trajectory: WarmupTrajectory,
    pub activations: ActivationBuffer,
}

/// Appends outputs token by token while the probe trains.
struct ActivationRecorder {
    d_out: usize,
    tokens: usize,
    z_te: Vec<f64>,
    z_se: Vec<Vec<f64>>,
}

impl ActivationRecorder {
    fn new(model: &Model, capacity: usize) -> Self {
        let d_out = model.config.d_hidden;
        Self {
            d_out,
            tokens: 0,
            z_te: Vec::with_capacity(capacity * d_out),
            z_se: vec![Vec::with_capacity(capacity * d_out); model.layer.n_experts()],
        }
    }

    fn record(&mut self, model: &Model, te: &TransientExpert, batch: &[Sample]) -> Result<()> {
        for s in batch {
            self.z_te.extend(te.forward(&s.x)?);
            for (buf, expert) in self.z_se.iter_mut().zip(&model.layer.experts) {
                buf.extend(expert.forward(&s.x)?);
            }
            self.tokens += 1;
        }
        Ok(())
    }

    fn finish(self) -> Result<ActivationBuffer> {
        let (n, d) = (self.tokens, self.d_out);
        Ok(ActivationBuffer {
            z_te: Matrix::from_vec(n, d, self.z_te)?,
            z_se: self
                .z_se
                .into_iter()
                .map(|z| Matrix::from_vec(n, d, z))
                .collect::<Result<_>>()?,
        })
    }
}

/// Plain gradient descent on the probe, one step per `batch_size` chunk of
/// `warmup`, in order. Only the probe moves. Each token's probe output is
/// recorded with the probe as it stood when that token's batch was seen.
pub fn warmup_transient(
    model: &Model,
    warmup: &[Sample],
    eta: f64,
    batch_size: usize,
    transient: TransientExpert,
) -> Result<WarmupOutcome> {
    if warmup.is_empty() {
        return Err(Error::Empty("warm-up stream"));
    }
    if batch_size == 0 || warmup.len() < batch_size {
        return Err(Error::invalid(format!(
            "warm-up stream of {} samples is shorter than one batch of {batch_size}",
            warmup.len()
        )));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("warm-up step size must be positive, got {eta}")));
    }
    let mut te = transient;
    let phi_0 = te.expert.clone();
    let mut omega_a = Matrix::zeros(te.expert.a.rows(), te.expert.a.cols());
    let mut omega_b = Matrix::zeros(te.expert.b.rows(), te.expert.b.cols());
    let mut steps = Vec::new();
    let mut activations = ActivationRecorder::new(model, warmup.len());
    for (s, batch) in warmup.chunks(batch_size).enumerate() {
        activations.record(model, &te, batch)?;
        let (loss, ga, gb) = transient_loss_and_grad(model, &te, batch)?;
        if !loss.is_finite() || !ga.is_finite() || !gb.is_finite() {
            return Err(Error::NonFinite {
                context: format!("transient warm-up step {s} (loss {loss})"),
            });
        }
        // Δφ = −η·g, so −g·Δφ = η·g².
        for (param, (grad, omega)) in [
            (&mut te.expert.a, (&ga, &mut omega_a)),
            (&mut te.expert.b, (&gb, &mut omega_b)),
        ] {
            for ((p, &g), o) in param.data_mut().iter_mut().zip(grad.data()).zip(omega.data_mut()) {
                let delta = -eta * g;
                *o += -g * delta;
                *p += delta;
            }
        }
        steps.push(WarmupStep {
            loss,
            grad_a: ga,
            grad_b: gb,
        });
    }
    let activations = activations.finish()?;
    Ok(WarmupOutcome {
        transient: te,
        trajectory: WarmupTrajectory {
            phi_0,
            omega_a,
            omega_b,
            steps_taken: steps.len(),
            eta,
            steps,
        },
        activations,
    })
}

/// `Ω_k = max(ω_k, 0) / ((φ_S,k − φ_0,k)² + ξ)`.
pub fn finalize_importance(traj: &WarmupTrajectory, te_final: &TransientExpert, xi: f64) -> Result<ImportanceMask> {
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(Error::invalid(format!("damping must be positive, got {xi}")));
    }
    if traj.steps_taken == 0 {
        return Err(Error::invalid("importance needs at least one warm-up step"));
    }
    let normalise = |omega: &Matrix, end: &Matrix, start: &Matrix| -> Result<Matrix> {
        if omega.shape() != end.shape() || end.shape() != start.shape() {
            return Err(Error::Shape {
                op: "finalize_importance",
                left: omega.shape(),
                right: end.shape(),
            });
        }
        let data = omega
            .data()
            .iter()
            .zip(end.data().iter().zip(start.data()))
            .map(|(&w, (&e, &s))| w.max(0.0) / ((e - s).powi(2) + xi))
            .collect();
        Matrix::from_vec(omega.rows(), omega.cols(), data)
    };
    Ok(ImportanceMask {
        omega_a: normalise(&traj.omega_a, &te_final.expert.a, &traj.phi_0.a)?,
        omega_b: normalise(&traj.omega_b, &te_final.expert.b, &traj.phi_0.b)?,
    })
}

/// Linear CKA of two column-centred activation matrices,
/// `‖Z_bᵀZ_a‖²_F / (‖Z_aᵀZ_a‖_F · ‖Z_bᵀZ_b‖_F)`.
///
/// An all-zero input carries no representation and scores 0.
pub fn compute_cka(z_a: &Matrix, z_b: &Matrix) -> Result<f64> {
    if z_a.shape() != z_b.shape() {
        return Err(Error::Shape {
            op: "compute_cka",
            left: z_a.shape(),
            right: z_b.shape(),
        });
    }
    if z_a.is_zero() || z_b.is_zero() {
        log::warn!("CKA on an all-zero activation matrix; scoring 0");
        return Ok(0.0);
    }
    let cross = matmul(&z_b.transpose(), z_a)?.frobenius_norm();
    let self_a = matmul(&z_a.transpose(), z_a)?.frobenius_norm();
    let self_b = matmul(&z_b.transpose(), z_b)?.frobenius_norm();
    let denom = self_a * self_b;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(cross * cross / denom)
}

pub fn consistency_scores(buf: &ActivationBuffer) -> Result<ConsistencyScores> {
    let te = center_columns(&buf.z_te)?;
    let h = buf
        .z_se
        .iter()
        .map(|z| compute_cka(&te, &center_columns(z)?))
        .collect::<Result<_>>()?;
    Ok(ConsistencyScores { h })
}
