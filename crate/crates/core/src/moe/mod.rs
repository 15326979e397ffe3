//! The adapted model: a frozen two-layer MLP whose first linear block carries
//! a pool of low-rank experts behind a sparse, optionally biased router.

mod config;
pub mod grad;
pub mod params;
mod routing;

use std::borrow::Borrow;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{argmax, log_sum_exp, softmax, Matrix};
use crate::probe::TransientExpert;
use crate::seed::{rng_for, Stream};
use crate::taskgen::Sample;

pub use config::ModelConfig;
pub use params::{count_trainable_params, ArchSpec, ParamCount};
pub use routing::{apply_cp_bias, native_logits_and_probs, route, route_topk, RoutingDecision};

/// Frozen backbone `x → W2·tanh(W1·x + b1) + b2`.
///
/// Nothing in the crate hands out a mutable reference to these weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenBackbone {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

impl FrozenBackbone {
    pub fn new(d_in: usize, d_hidden: usize, n_classes: usize, rng: &mut impl Rng) -> Self {
        let n1 = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (1.0 / d_hidden as f64).sqrt()).unwrap();
        let w1 = Matrix::from_fn(d_hidden, d_in, |_, _| n1.sample(rng));
        let w2 = Matrix::from_fn(n_classes, d_hidden, |_, _| n2.sample(rng));
        Self {
            w1,
            b1: vec![0.0; d_hidden],
            w2,
            b2: vec![0.0; n_classes],
        }
    }

    pub fn from_parts(w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64>) -> Result<Self> {
        if b1.len() != w1.rows() || w2.cols() != w1.rows() || b2.len() != w2.rows() {
            return Err(Error::invalid("inconsistent backbone shapes"));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &Matrix {
        &self.w2
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    pub fn d_in(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.w2.rows()
    }

    /// Output of the adapted block `F(x) = W1·x + b1`.
    pub fn block(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.w1.matvec(x)?;
        for (v, b) in z.iter_mut().zip(&self.b1) {
            *v += b;
        }
        Ok(z)
    }

    /// Everything after the adapted block.
    pub fn head(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let a: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
        let mut logits = self.w2.matvec(&a)?;
        for (v, b) in logits.iter_mut().zip(&self.b2) {
            *v += b;
        }
        Ok((a, logits))
    }

    pub fn hash(&self) -> String {
        hash_arrays([self.w1.data(), &self.b1, self.w2.data(), &self.b2])
    }
}

/// One low-rank adapter `E(x) = B·A·x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraExpert {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraExpert {
    /// `A ~ U[−1/√d_in, 1/√d_in]`, `B = 0`: zero effect at initialisation.
    pub fn init(d_in: usize, d_out: usize, rank: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).unwrap();
        Self {
            a: Matrix::from_fn(rank, d_in, |_, _| dist.sample(rng)),
            b: Matrix::zeros(d_out, rank),
        }
    }

    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(Error::Shape {
                op: "LoraExpert::new",
                left: a.shape(),
                right: b.shape(),
            });
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// `(A·x, B·A·x)`.
    pub fn forward_parts(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let u = self.a.matvec(x)?;
        let e = self.b.matvec(&u)?;
        Ok((u, e))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_parts(x)?.1)
    }
}

/// Free-function form of [`LoraExpert::forward`].
pub fn expert_forward(expert: &LoraExpert, x: &[f64]) -> Result<Vec<f64>> {
    expert.forward(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Router {
    /// `d_in × n_experts`
    pub w_gate: Matrix,
}

impl Router {
    pub fn init(d_in: usize, n_experts: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).unwrap();
        Self {
            w_gate: Matrix::from_fn(d_in, n_experts, |_, _| dist.sample(rng)),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.w_gate.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    pub experts: Vec<LoraExpert>,
    pub router: Router,
    pub lora_scale: f64,
    pub top_k: usize,
}

impl MoeLayer {
    pub fn new(experts: Vec<LoraExpert>, router: Router, lora_scale: f64, top_k: usize) -> Result<Self> {
        let first = experts.first().ok_or(Error::Empty("MoeLayer::new"))?;
        if experts
            .iter()
            .any(|e| e.a.shape() != first.a.shape() || e.b.shape() != first.b.shape())
        {
            return Err(Error::invalid("experts must share identical shapes"));
        }
        if router.n_experts() != experts.len() || router.w_gate.rows() != first.d_in() {
            return Err(Error::Shape {
                op: "MoeLayer::new",
                left: router.w_gate.shape(),
                right: crate::error::Shape(first.d_in(), experts.len()),
            });
        }
        if top_k == 0 || top_k > experts.len() {
            return Err(Error::invalid(format!(
                "top_k = {top_k} must lie in [1, {}]",
                experts.len()
            )));
        }
        Ok(Self {
            experts,
            router,
            lora_scale,
            top_k,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn rank(&self) -> usize {
        self.experts[0].rank()
    }

    /// `α / r` applied to every expert contribution.
    pub fn expert_scale(&self) -> f64 {
        self.lora_scale / self.rank() as f64
    }

    pub fn stable_hash(&self) -> String {
        let mut arrays: Vec<&[f64]> = Vec::new();
        for e in &self.experts {
            arrays.push(e.a.data());
            arrays.push(e.b.data());
        }
        arrays.push(self.router.w_gate.data());
        hash_arrays(arrays)
    }
}

/// Additive router bias `α·h`.
#[derive(Debug, Clone, Copy)]
pub struct CpBias<'a> {
    pub h: &'a [f64],
    pub alpha: f64,
}

/// Per-call switches for a forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardCtx<'a> {
    pub bias: Option<CpBias<'a>>,
    pub transient: Option<&'a TransientExpert>,
    /// Multiplicative mask on the expert-path input (inverted dropout).
    pub dropout_mask: Option<&'a [f64]>,
}

/// Everything the backward pass needs from one sample.
#[derive(Debug, Clone)]
pub struct Trace {
    pub x: Vec<f64>,
    /// Expert-path input after dropout.
    pub x_expert: Vec<f64>,
    pub routing: RoutingDecision,
    /// `(A_i·x, B_i·A_i·x)` for every selected expert, aligned with `routing.selected`.
    pub expert_parts: Vec<(Vec<f64>, Vec<f64>)>,
    pub transient_parts: Option<(Vec<f64>, Vec<f64>)>,
    /// Adapted block output before the nonlinearity.
    pub z: Vec<f64>,
    pub activation: Vec<f64>,
    pub logits: Vec<f64>,
}

/// `F(x) + (α/r)·Σ_{i∈K} g_i·E_i(x) [+ (α/r)·E_TE(x)]`, returning the
/// intermediate values as a [`Trace`].
pub fn moe_forward(layer: &MoeLayer, backbone: &FrozenBackbone, x: &[f64], ctx: &ForwardCtx<'_>) -> Result<Trace> {
    if x.len() != backbone.d_in() {
        return Err(Error::Length {
            op: "moe_forward",
            expected: backbone.d_in(),
            got: x.len(),
        });
    }
    let routing = route(&layer.router, x, ctx.bias, layer.top_k)?;
    let x_expert: Vec<f64> = match ctx.dropout_mask {
        Some(mask) => {
            if mask.len() != x.len() {
                return Err(Error::Length {
                    op: "dropout mask",
                    expected: x.len(),
                    got: mask.len(),
                });
            }
            x.iter().zip(mask).map(|(v, m)| v * m).collect()
        }
        None => x.to_vec(),
    };
    let scale = layer.expert_scale();
    let mut z = backbone.block(x)?;
    let mut expert_parts = Vec::with_capacity(routing.selected.len());
    for &i in &routing.selected {
        let (u, e) = layer.experts[i].forward_parts(&x_expert)?;
        let g = routing.weights[i];
        for (zv, ev) in z.iter_mut().zip(&e) {
            *zv += scale * g * ev;
        }
        expert_parts.push((u, e));
    }
    let transient_parts = match ctx.transient {
        Some(te) => {
            let (u, e) = te.expert.forward_parts(&x_expert)?;
            for (zv, ev) in z.iter_mut().zip(&e) {
                *zv += scale * ev;
            }
            Some((u, e))
        }
        None => None,
    };
    let (activation, logits) = backbone.head(&z)?;
    Ok(Trace {
        x: x.to_vec(),
        x_expert,
        routing,
        expert_parts,
        transient_parts,
        z,
        activation,
        logits,
    })
}

/// Frozen backbone plus its adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: FrozenBackbone,
    pub layer: MoeLayer,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, Stream::Init, 0);
        let backbone = FrozenBackbone::new(config.d_in, config.d_hidden, config.n_classes, &mut rng);
        let experts = (0..config.n_experts)
            .map(|_| LoraExpert::init(config.d_in, config.d_hidden, config.expert_rank, &mut rng))
            .collect();
        let router = Router::init(config.d_in, config.n_experts, &mut rng);
        let layer = MoeLayer::new(experts, router, config.lora_scale, config.top_k)?;
        Ok(Self {
            config,
            backbone,
            layer,
        })
    }

    pub fn forward(&self, x: &[f64], ctx: &ForwardCtx<'_>) -> Result<Trace> {
        moe_forward(&self.layer, &self.backbone, x, ctx)
    }

    pub fn predict(&self, x: &[f64], ctx: &ForwardCtx<'_>) -> Result<usize> {
        Ok(argmax(&self.forward(x, ctx)?.logits))
    }

    /// Number of trainable scalars in the stable adapter (experts + router).
    pub fn trainable_len(&self) -> usize {
        self.layer.experts.iter().map(|e| e.a.len() + e.b.len()).sum::<usize>() + self.layer.router.w_gate.len()
    }
}

/// Mean negative log-likelihood of the correct class.
pub fn task_loss<S: Borrow<Sample>>(model: &Model, batch: &[S], ctx: &ForwardCtx<'_>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("task_loss"));
    }
    let mut total = 0.0;
    for s in batch {
        let s = s.borrow();
        let trace = model.forward(&s.x, ctx)?;
        total += cross_entropy(&trace.logits, s.label)?;
    }
    Ok(total / batch.len() as f64)
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

pub fn class_probs(logits: &[f64]) -> Result<Vec<f64>> {
    softmax(logits)
}

fn hash_arrays<'a>(arrays: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut hasher = Sha256::new();
    for a in arrays {
        hasher.update((a.len() as u64).to_le_bytes());
        for v in a {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
