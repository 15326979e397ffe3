//! The continual-learning loop: probe, protected training, consolidation.

mod objective;
mod optim;

use std::ops::ControlFlow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consolidation::ConsolidationState;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::AccuracyMatrix;
use crate::moe::{CpBias, ForwardCtx, Model, ModelConfig};
use crate::numerics::argmax;
use crate::probe::{
    consistency_scores, finalize_importance, warmup_transient, ConsistencyScores, ImportanceMask, TransientExpert,
};
use crate::seed::{derive_seed, rng_for, task_epoch, Stream};
use crate::taskgen::{batches, Dataset, TaskStream};

pub use objective::{objective, LossTerms, Objective};
pub use optim::OptimState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            base_lr: 1e-3,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs: must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size: must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base_lr: must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay: must be nonnegative"));
        }
        Ok(())
    }
}

/// Component switches. All on is the full method; all off is plain LoRA-MoE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Add `α·h` to router logits.
    pub cp_bias: bool,
    /// Accumulate probe importance and penalise drift.
    pub te_reg: bool,
    /// Weight accumulation by `h`; when off every expert gets the same weight.
    pub cka_weighting: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            cp_bias: true,
            te_reg: true,
            cka_weighting: true,
        }
    }
}

impl Ablation {
    pub const VANILLA: Ablation = Ablation {
        cp_bias: false,
        te_reg: false,
        cka_weighting: true,
    };

    pub fn needs_probe(&self) -> bool {
        self.cp_bias || self.te_reg
    }

    /// Short stable name used for output directories and reports.
    pub fn label(&self) -> String {
        match (self.cp_bias, self.te_reg, self.cka_weighting) {
            (false, false, _) => "vanilla".into(),
            (true, true, true) => "full".into(),
            (true, true, false) => "full-uniform-h".into(),
            (true, false, _) => "cp_bias-only".into(),
            (false, true, true) => "te_reg-only".into(),
            (false, true, false) => "te_reg-only-uniform-h".into(),
        }
    }

    /// Applies a comma-separated list of components to switch off.
    pub fn disable(mut self, list: &str) -> Result<Self> {
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "cp_bias" => self.cp_bias = false,
                "te_reg" => self.te_reg = false,
                "cka_weighting" | "cka" => self.cka_weighting = false,
                other => return Err(Error::invalid(format!("unknown ablation `{other}`"))),
            }
        }
        Ok(self)
    }
}

/// Everything that persists between tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualState {
    pub model: Model,
    pub consolidation: ConsolidationState,
    /// Routing prior from the most recent warm-up.
    pub active_h: Option<ConsistencyScores>,
    pub tasks_done: usize,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub backbone_hash: String,
}

impl ContinualState {
    pub fn new(model: ModelConfig, train: TrainConfig, ablation: Ablation) -> Result<Self> {
        train.validate()?;
        let model = Model::new(model)?;
        let consolidation = ConsolidationState::new(&model.layer);
        let backbone_hash = model.backbone.hash();
        Ok(Self {
            model,
            consolidation,
            active_h: None,
            tasks_done: 0,
            train,
            ablation,
            backbone_hash,
        })
    }

    pub fn seed(&self) -> u64 {
        self.model.config.seed
    }

    /// Router bias in effect for training and evaluation.
    pub fn bias(&self) -> Option<CpBias<'_>> {
        match (&self.active_h, self.ablation.cp_bias) {
            (Some(h), true) => Some(CpBias {
                h: &h.h,
                alpha: self.model.config.cp_bias_strength,
            }),
            _ => None,
        }
    }

    pub fn check_backbone(&self) -> Result<()> {
        if self.model.backbone.hash() != self.backbone_hash {
            return Err(Error::invalid("frozen backbone changed"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub terms: LossTerms,
    /// Tokens routed to each expert in this batch.
    pub usage: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: usize,
    /// CKA scores used as routing prior.
    pub h: ConsistencyScores,
    /// Scores used to weight importance accumulation.
    pub h_accumulated: ConsistencyScores,
    pub omega: ImportanceMask,
    pub warmup_losses: Vec<f64>,
    /// Smallest raw path-integral entry before clamping.
    pub omega_raw_min: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    pub probe: Option<ProbeReport>,
    pub steps: Vec<StepLog>,
    pub epoch_losses: Vec<f64>,
    /// Tokens routed to each expert over the whole task.
    pub expert_load: Vec<usize>,
}

/// Trains a throwaway probe on the first warm-up samples of `train` and
/// derives the importance mask and consistency scores. The probe is dropped
/// before returning.
pub fn probe_task(state: &ContinualState, task: usize, train: &Dataset) -> Result<ProbeReport> {
    let cfg = &state.model.config;
    let warm = train.prefix(cfg.warmup_samples);
    if warm.len() < cfg.warmup_batch {
        return Err(Error::invalid(format!(
            "task {task}: warm-up has {} samples, shorter than one batch of {}",
            warm.len(),
            cfg.warmup_batch
        )));
    }
    let mut rng = rng_for(state.seed(), Stream::Transient, task as u64);
    let te = TransientExpert::init(&state.model, &mut rng);
    let out = warmup_transient(&state.model, warm, cfg.warmup_lr, cfg.warmup_batch, te)?;
    let omega = finalize_importance(&out.trajectory, &out.transient, cfg.damping)?;
    let h = consistency_scores(&out.activations)?;
    let h_accumulated = if state.ablation.cka_weighting {
        h.clone()
    } else {
        ConsistencyScores::uniform(h.len(), h.mean())
    };
    let omega_raw_min = out
        .trajectory
        .omega_a
        .data()
        .iter()
        .chain(out.trajectory.omega_b.data())
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(ProbeReport {
        task,
        h,
        h_accumulated,
        omega,
        warmup_losses: out.trajectory.steps.iter().map(|s| s.loss).collect(),
        omega_raw_min,
        steps: out.trajectory.steps_taken,
    })
}

fn dropout_masks(rng: &mut impl Rng, n: usize, dim: usize, p: f64) -> Vec<Vec<f64>> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect()
        })
        .collect()
}

/// Probe, train under protection, consolidate. `train` is the only data
/// this function can reach.
pub fn run_task(state: &mut ContinualState, task: usize, train: &Dataset) -> Result<TaskLog> {
    if train.is_empty() {
        return Err(Error::Empty("task dataset"));
    }
    let seed = state.seed();
    let probe = if state.ablation.needs_probe() {
        let report = probe_task(state, task, train)?;
        state.active_h = Some(report.h.clone());
        Some(report)
    } else {
        state.active_h = None;
        None
    };

    let cfg = state.model.config.clone();
    let tc = state.train.clone();
    let lambda = if state.ablation.te_reg { cfg.lambda } else { 0.0 };
    let per_epoch = train.len().div_ceil(tc.batch_size);
    let sizes: Vec<usize> = state.model.layer.param_slices().iter().map(|s| s.len()).collect();
    let mut opt = OptimState::new(tc.base_lr, tc.weight_decay, tc.epochs * per_epoch, &sizes);
    let n = cfg.n_experts;
    let mut expert_load = vec![0usize; n];
    let mut steps = Vec::with_capacity(tc.epochs * per_epoch);
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let h = state.active_h.clone();

    for epoch in 0..tc.epochs {
        let key = task_epoch(task, epoch);
        let mut drop_rng = rng_for(seed, Stream::Dropout, key);
        let mut epoch_loss = 0.0;
        for (b, batch) in batches(train, tc.batch_size, derive_seed(seed, Stream::Shuffle, key))?.enumerate() {
            let masks =
                (cfg.lora_dropout > 0.0).then(|| dropout_masks(&mut drop_rng, batch.len(), cfg.d_in, cfg.lora_dropout));
            let bias = match (&h, state.ablation.cp_bias) {
                (Some(h), true) => Some(CpBias {
                    h: &h.h,
                    alpha: cfg.cp_bias_strength,
                }),
                _ => None,
            };
            let obj = objective(
                &state.model,
                &batch,
                bias,
                masks.as_deref(),
                &state.consolidation,
                lambda,
                cfg.gamma,
                true,
            )
            .map_err(|e| match e {
                Error::NonFinite { context } => Error::NumericalAbort {
                    task,
                    batch: epoch * per_epoch + b,
                    detail: context,
                },
                other => other,
            })?;
            let grads = obj.grads.expect("requested");
            if !obj.terms.total.is_finite() || !grads.is_finite() {
                return Err(Error::NumericalAbort {
                    task,
                    batch: epoch * per_epoch + b,
                    detail: format!("loss {}", obj.terms.total),
                });
            }
            let mut usage = vec![0usize; n];
            for d in &obj.decisions {
                for &i in &d.selected {
                    usage[i] += 1;
                }
            }
            for (l, u) in expert_load.iter_mut().zip(&usage) {
                *l += u;
            }
            let lr = {
                let mut params = state.model.layer.param_slices_mut();
                opt.optimiser_step(&mut params, &grads.slices())?
            };
            epoch_loss += obj.terms.total;
            steps.push(StepLog {
                task,
                epoch,
                step: opt.step,
                lr,
                terms: obj.terms,
                usage,
            });
        }
        epoch_losses.push(epoch_loss / per_epoch as f64);
    }

    if let (Some(p), true) = (&probe, state.ablation.te_reg) {
        state.consolidation.accumulate_importance(&p.omega, &p.h_accumulated)?;
    }
    state.consolidation.snapshot_experts(&state.model.layer);
    state.tasks_done = task + 1;
    state.check_backbone()?;
    Ok(TaskLog {
        task,
        probe,
        steps,
        epoch_losses,
        expert_load,
    })
}

/// Fraction of argmax-correct predictions; no dropout.
pub fn evaluate(model: &Model, data: &Dataset, bias: Option<CpBias<'_>>, exec: Exec) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let ctx = ForwardCtx {
        bias,
        transient: None,
        dropout_mask: None,
    };
    let hits = exec.map(data.samples(), |s| {
        model.forward(&s.x, &ctx).map(|t| argmax(&t.logits) == s.label)
    });
    let mut correct = 0usize;
    for h in hits {
        if h? {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Read-only evaluation record, kept apart from training logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub stage: usize,
    pub row: usize,
    pub accuracy: f64,
}

/// Runs every remaining seen task of `stream` (starting at
/// `state.tasks_done`), filling one matrix column per task. `on_stage` is
/// called after each column is complete and may stop the stream early.
pub fn run_stream<F>(
    state: &mut ContinualState,
    stream: &TaskStream,
    matrix: &mut AccuracyMatrix,
    exec: Exec,
    mut on_stage: F,
) -> Result<(Vec<TaskLog>, Vec<EvalRecord>)>
where
    F: FnMut(&ContinualState, &AccuracyMatrix, &TaskLog) -> Result<ControlFlow<()>>,
{
    if stream.seen.is_empty() {
        return Err(Error::invalid("stream has no seen tasks"));
    }
    let mut logs = Vec::new();
    let mut evals = Vec::new();
    for t in state.tasks_done..stream.seen.len() {
        let log = run_task(state, t, &stream.seen[t].train)?;
        let tests: Vec<&Dataset> = stream.all_tasks().map(|task| &task.test).collect();
        let bias = state.bias();
        let accs = tests
            .iter()
            .map(|d| evaluate(&state.model, d, bias, exec))
            .collect::<Result<Vec<_>>>()?;
        for (row, acc) in accs.into_iter().enumerate() {
            matrix.set(row, t, acc)?;
            evals.push(EvalRecord {
                stage: t,
                row,
                accuracy: acc,
            });
        }
        let flow = on_stage(state, matrix, &log)?;
        logs.push(log);
        if flow.is_break() {
            break;
        }
    }
    Ok((logs, evals))
}
