use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model and method hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub n_classes: usize,
    pub n_experts: usize,
    /// Rank of each expert (`r_e`).
    pub expert_rank: usize,
    pub top_k: usize,
    /// LoRA scaling `α` in `F(x) + (α/r)·Σ g_i E_i(x)`.
    pub lora_scale: f64,
    pub lora_dropout: f64,
    /// Strength of the consistency bias added to router logits.
    pub cp_bias_strength: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Plain-GD step size of the transient expert.
    pub warmup_lr: f64,
    /// Number of leading training samples used for the transient warm-up.
    pub warmup_samples: usize,
    pub warmup_batch: usize,
    /// `ξ` in the importance normalisation.
    pub damping: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            d_hidden: 64,
            n_classes: 4,
            n_experts: 8,
            expert_rank: 4,
            top_k: 2,
            lora_scale: 4.0,
            lora_dropout: 0.1,
            cp_bias_strength: 0.2,
            lambda: 5e3,
            gamma: 0.1,
            warmup_lr: 0.1,
            warmup_samples: 512,
            warmup_batch: 32,
            damping: 1e-3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Checks every constraint, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::invalid(format!("{field}: {msg}")));
        if self.d_in == 0 || self.d_hidden == 0 {
            return fail("d_in", "dimensions must be positive".into());
        }
        if self.n_classes < 2 {
            return fail("n_classes", format!("need at least 2, got {}", self.n_classes));
        }
        if self.n_experts == 0 {
            return fail("n_experts", "need at least one expert".into());
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return fail(
                "top_k",
                format!("{} not in [1, n_experts = {}]", self.top_k, self.n_experts),
            );
        }
        let max_rank = self.d_in.min(self.d_hidden) / 2;
        if self.expert_rank == 0 || self.expert_rank > max_rank {
            return fail(
                "expert_rank",
                format!("{} not in [1, min(d_in, d_hidden)/2 = {max_rank}]", self.expert_rank),
            );
        }
        if !(self.lora_scale > 0.0 && self.lora_scale.is_finite()) {
            return fail("lora_scale", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return fail("lora_dropout", format!("{} not in [0, 1)", self.lora_dropout));
        }
        for (name, v) in [
            ("cp_bias_strength", self.cp_bias_strength),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(name, format!("must be finite and nonnegative, got {v}"));
            }
        }
        if !(self.warmup_lr > 0.0 && self.warmup_lr.is_finite()) {
            return fail("warmup_lr", "must be positive".into());
        }
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            return fail("damping", "must be positive".into());
        }
        if self.warmup_batch == 0 {
            return fail("warmup_batch", "must be positive".into());
        }
        if self.warmup_samples < self.warmup_batch {
            return fail(
                "warmup_samples",
                format!(
                    "{} is shorter than one warm-up batch ({})",
                    self.warmup_samples, self.warmup_batch
                ),
            );
        }
        Ok(())
    }

    /// Total LoRA rank across all experts (`r = n·r_e`).
    pub fn total_rank(&self) -> usize {
        self.n_experts * self.expert_rank
    }
}
