//! Independent verification machinery.
//!
//! * Multi-step gradient descent on a quadratic `½δᵀHδ + gᵀδ` is checked
//!   against its spectral closed form `δ_S = −q_S(H)·g` with
//!   `q_S(λ) = η Σ_{s<S} (1 − ηλ)^s = (1 − (1 − ηλ)^S)/λ`.
//! * A central finite-difference gradient checker for the full training
//!   objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::consolidation::ConsolidationState;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::moe::{CpBias, Model, ModelConfig};
use crate::numerics::{dot, matmul, Matrix};
use crate::probe::{ConsistencyScores, ImportanceMask};
use crate::taskgen::Sample;
use crate::trainer::objective;

const POWER_ITERS: usize = 50;
const POWER_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticProblem {
    /// Symmetric positive semidefinite curvature.
    pub h: Matrix,
    pub g: Vec<f64>,
    pub eta: f64,
    pub steps: usize,
}

/// Largest eigenvalue magnitude by power iteration from the all-ones vector.
pub fn spectral_norm(h: &Matrix) -> Result<f64> {
    let n = h.rows();
    if n == 0 || n != h.cols() {
        return Err(Error::invalid("spectral_norm needs a non-empty square matrix"));
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut estimate = 0.0;
    for _ in 0..POWER_ITERS {
        let w = h.matvec(&v)?;
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = w.iter().map(|x| x / norm).collect();
        let converged = (norm - estimate).abs() <= POWER_TOL * norm.max(1.0);
        estimate = norm;
        if converged {
            break;
        }
    }
    Ok(estimate)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns `(eigenvalues, V)` with eigenvectors in the columns of `V`.
pub fn symmetric_eigen(h: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = h.rows();
    if n != h.cols() {
        return Err(Error::Shape {
            op: "symmetric_eigen",
            left: h.shape(),
            right: h.shape(),
        });
    }
    let mut a = h.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    Ok(((0..n).map(|i| a.get(i, i)).collect(), v))
}

impl QuadraticProblem {
    /// Gram-product PSD problem `H = MᵀM/d` with `η = 1/(2‖H‖₂)`.
    pub fn random(dim: usize, steps: usize, ridge: f64, rng: &mut impl Rng) -> Result<Self> {
        let m = Matrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
        let mut h = matmul(&m.transpose(), &m)?;
        h.scale(1.0 / dim as f64);
        for i in 0..dim {
            h.set(i, i, h.get(i, i) + ridge);
        }
        // Exact symmetry regardless of rounding in the product.
        let h = Matrix::from_fn(dim, dim, |i, j| 0.5 * (h.get(i, j) + h.get(j, i)));
        let g = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = spectral_norm(&h)?;
        Ok(Self {
            h,
            g,
            eta: 1.0 / (2.0 * norm),
            steps,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.h.rows();
        if d != self.h.cols() || self.g.len() != d {
            return Err(Error::invalid("quadratic problem shapes are inconsistent"));
        }
        for i in 0..d {
            for j in i + 1..d {
                if (self.h.get(i, j) - self.h.get(j, i)).abs() > 1e-12 {
                    return Err(Error::invalid(format!("H not symmetric at ({i}, {j})")));
                }
            }
        }
        let (eig, _) = symmetric_eigen(&self.h)?;
        if let Some(min) = eig.iter().copied().reduce(f64::min) {
            if min < -1e-10 {
                return Err(Error::invalid(format!("H has negative eigenvalue {min}")));
            }
        }
        let norm = spectral_norm(&self.h)?;
        if !(self.eta > 0.0 && self.eta * norm < 2.0) {
            return Err(Error::invalid(format!(
                "step size {} violates η < 2/‖H‖₂ = {}",
                self.eta,
                2.0 / norm
            )));
        }
        Ok(())
    }
}

/// Spectral filter gain `q_S(λ) = η Σ_{s<S}(1 − ηλ)^s`, evaluated in closed form.
pub fn q_filter(lambda: f64, eta: f64, steps: usize) -> f64 {
    if lambda == 0.0 {
        return eta * steps as f64;
    }
    // 1 − (1 − ηλ)^S without cancellation.
    let one_minus_pow = -(steps as f64 * (-eta * lambda).ln_1p()).exp_m1();
    one_minus_pow / lambda
}

/// `δ_{s+1} = (I − ηH)δ_s − ηg` from `δ_0 = 0`.
pub fn simulate_gd(p: &QuadraticProblem) -> Result<Vec<f64>> {
    p.validate()?;
    let mut delta = vec![0.0; p.g.len()];
    for _ in 0..p.steps {
        let hd = p.h.matvec(&delta)?;
        for ((d, hdi), gi) in delta.iter_mut().zip(&hd).zip(&p.g) {
            *d -= p.eta * (hdi + gi);
        }
    }
    Ok(delta)
}

/// `−q_S(H)·g` through the eigendecomposition of `H`.
pub fn closed_form_displacement(p: &QuadraticProblem) -> Result<Vec<f64>> {
    p.validate()?;
    let (eig, v) = symmetric_eigen(&p.h)?;
    let coeffs = v.matvec_t(&p.g)?;
    let filtered: Vec<f64> = coeffs
        .iter()
        .zip(&eig)
        .map(|(c, &l)| -q_filter(l, p.eta, p.steps) * c)
        .collect();
    v.matvec(&filtered)
}

/// Solves `H x = b` for symmetric positive definite `H` by Cholesky.
pub fn solve_spd(h: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = h.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = h.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::invalid("matrix is not positive definite"));
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l.get(i, k) * y[k]).sum();
        y[i] = (b[i] - s) / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l.get(k, i) * x[k]).sum();
        x[i] = (y[i] - s) / l.get(i, i);
    }
    Ok(x)
}

pub fn relative_error(a: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(reference)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = reference.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Central-difference check of `analytic` for the scalar function `f` around
/// `theta`. `f` returns `None` when the point is not admissible (for example
/// when routing flips). Returns the maximum of
/// `|a − n| / max(|a|, |n|, 1e-8)` over `indices`, or `None` if any probe
/// was inadmissible.
pub fn gradcheck<F>(theta: &[f64], analytic: &[f64], indices: &[usize], step: f64, mut f: F) -> Result<Option<f64>>
where
    F: FnMut(&[f64]) -> Result<Option<f64>>,
{
    if theta.len() != analytic.len() {
        return Err(Error::Length {
            op: "gradcheck",
            expected: theta.len(),
            got: analytic.len(),
        });
    }
    let mut worst: f64 = 0.0;
    let mut probe = theta.to_vec();
    for &k in indices {
        probe[k] = theta[k] + step;
        let Some(plus) = f(&probe)? else {
            return Ok(None);
        };
        probe[k] = theta[k] - step;
        let Some(minus) = f(&probe)? else {
            return Ok(None);
        };
        probe[k] = theta[k];
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[k];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(Some(worst))
}

/// Worst relative error per parameter group of the full objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

/// Checks every trainable group (each expert's `A`, `B`, and the router) of
/// `model` against central differences of `L_total`, with dropout off.
/// Returns `None` when any perturbation changes a top-K selection.
#[allow(clippy::too_many_arguments)]
pub fn gradcheck_objective(
    model: &Model,
    batch: &[Sample],
    bias: Option<CpBias<'_>>,
    consolidation: &ConsolidationState,
    lambda: f64,
    gamma: f64,
    step: f64,
) -> Result<Option<Vec<GroupReport>>> {
    let base = objective(model, batch, bias, None, consolidation, lambda, gamma, true)?;
    let grads = base.grads.expect("requested");
    let selections: Vec<Vec<usize>> = base.decisions.iter().map(|d| d.selected.clone()).collect();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let n_experts = model.layer.n_experts();
    let mut reports = Vec::new();
    for (group, analytic) in analytic.iter().enumerate() {
        let name = if group == 2 * n_experts {
            "router".to_string()
        } else {
            format!("expert{}.{}", group / 2, if group % 2 == 0 { "A" } else { "B" })
        };
        let theta = model.layer.param_slices()[group].to_vec();
        let indices: Vec<usize> = (0..theta.len()).collect();
        let mut scratch = model.clone();
        let result = gradcheck(&theta, analytic, &indices, step, |probe| {
            scratch.layer.param_slices_mut()[group].copy_from_slice(probe);
            let obj = objective(&scratch, batch, bias, None, consolidation, lambda, gamma, false)?;
            let stable = obj.decisions.iter().zip(&selections).all(|(d, s)| &d.selected == s);
            Ok(stable.then_some(obj.terms.total))
        })?;
        let Some(err) = result else {
            return Ok(None);
        };
        reports.push(GroupReport {
            group: name,
            entries: theta.len(),
            max_rel_error: err,
        });
    }
    Ok(Some(reports))
}

/// Outcome of the closed-form displacement check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormReport {
    pub problems: usize,
    /// `(d, S, relative error)` for each random problem, in draw order.
    pub per_problem: Vec<(usize, usize, f64)>,
    /// Worst closed-form vs. simulated GD relative error.
    pub max_rel_error: f64,
    /// `H = 0` returns `−ηSg` with no rounding at all.
    pub zero_curvature_exact: bool,
    /// Relative distance of the `S = 10⁴` displacement from `−H⁻¹g`.
    pub limit_rel_error: f64,
}

impl ClosedFormReport {
    pub fn passes(&self) -> bool {
        self.max_rel_error <= 1e-8 && self.zero_curvature_exact && self.limit_rel_error <= 1e-6
    }
}

/// Random problems with `d ≤ 64`, `S ≤ 200`, checked in parallel under
/// `exec`; plus the `H = 0` and large-`S` edge cases.
pub fn verify_closed_form(problems: usize, seed: u64, exec: Exec) -> Result<ClosedFormReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Uniform::new_inclusive(1usize, 64).expect("valid range");
    let steps = Uniform::new_inclusive(1usize, 200).expect("valid range");
    let set: Vec<QuadraticProblem> = (0..problems)
        .map(|_| {
            let (d, s) = (dims.sample(&mut rng), steps.sample(&mut rng));
            QuadraticProblem::random(d, s, 0.0, &mut rng)
        })
        .collect::<Result<_>>()?;
    let errors = exec.map(&set, |p| -> Result<f64> {
        Ok(relative_error(&closed_form_displacement(p)?, &simulate_gd(p)?))
    });
    let errors = errors.into_iter().collect::<Result<Vec<_>>>()?;
    let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
    let per_problem = set.iter().zip(errors).map(|(p, e)| (p.g.len(), p.steps, e)).collect();

    let g: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
    let zero = QuadraticProblem {
        h: Matrix::zeros(8, 8),
        g: g.clone(),
        eta: 0.01,
        steps: 37,
    };
    let expected: Vec<f64> = g.iter().map(|v| -zero.eta * zero.steps as f64 * v).collect();
    let zero_curvature_exact = closed_form_displacement(&zero)? == expected;

    let mut far = QuadraticProblem::random(8, 10_000, 0.1, &mut rng)?;
    far.steps = 10_000;
    let target: Vec<f64> = solve_spd(&far.h, &far.g)?.iter().map(|v| -v).collect();
    let limit_rel_error = relative_error(&closed_form_displacement(&far)?, &target);
    Ok(ClosedFormReport {
        problems,
        per_problem,
        max_rel_error,
        zero_curvature_exact,
        limit_rel_error,
    })
}

/// The small model used for gradient checks: 8 inputs, 3 experts of rank 2,
/// top-2 routing, 3 classes.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_in: 8,
        d_hidden: 8,
        n_classes: 3,
        n_experts: 3,
        expert_rank: 2,
        top_k: 2,
        lora_dropout: 0.0,
        lambda: 5e3,
        gamma: 0.1,
        seed,
        ..ModelConfig::default()
    }
}

/// Gradient check of `L_total` on the tiny model at a generic point: random
/// nonzero `B`, a random router, accumulated importance, parameters moved
/// away from their snapshot, and an active routing prior. Draws new points
/// until one has stable routing under every perturbation.
pub fn tiny_gradcheck(seed: u64, step: f64) -> Result<Vec<GroupReport>> {
    let cfg = tiny_config(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = |rng: &mut ChaCha8Rng, m: &mut Matrix, scale: f64| {
        for v in m.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += scale * z;
        }
    };
    for _attempt in 0..64 {
        let mut model = Model::new(cfg.clone())?;
        for e in &mut model.layer.experts {
            noise(&mut rng, &mut e.a, 0.3);
            noise(&mut rng, &mut e.b, 0.3);
        }
        noise(&mut rng, &mut model.layer.router.w_gate, 1.0);
        let mut cons = ConsolidationState::new(&model.layer);
        let e0 = &model.layer.experts[0];
        let mut omega = ImportanceMask::zeros_like(e0);
        for v in omega.omega_a.data_mut().iter_mut().chain(omega.omega_b.data_mut()) {
            *v = rng.random::<f64>() * 1e-2;
        }
        let h: Vec<f64> = (0..cfg.n_experts).map(|_| rng.random::<f64>()).collect();
        cons.accumulate_importance(&omega, &ConsistencyScores { h: h.clone() })?;
        cons.snapshot_experts(&model.layer);
        for e in &mut model.layer.experts {
            noise(&mut rng, &mut e.a, 0.05);
            noise(&mut rng, &mut e.b, 0.05);
        }
        let batch: Vec<Sample> = (0..6)
            .map(|i| Sample {
                x: (0..cfg.d_in).map(|_| StandardNormal.sample(&mut rng)).collect(),
                label: i % cfg.n_classes,
            })
            .collect();
        let bias = Some(CpBias {
            h: &h,
            alpha: cfg.cp_bias_strength,
        });
        if let Some(reports) = gradcheck_objective(&model, &batch, bias, &cons, cfg.lambda, cfg.gamma, step)? {
            return Ok(reports);
        }
    }
    Err(Error::invalid("no routing-stable point found for the gradient check"))
}

#[cfg(test)]
mod tests;
