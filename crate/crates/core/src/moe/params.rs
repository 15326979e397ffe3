//! Trainable-parameter accounting for the split-expert adapter, its
//! transient probe and the router.
//!
//! For one adapted linear module `in → out` with total rank `r` split over
//! `E` experts (`r_e = r/E`):
//!
//! ```text
//! P_SE     = E·(in·r_e + r_e·out) = r·(in + out)
//! P_TE     = r_e·(in + out)
//! P_Router = in·E
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layers: u64,
    /// `(in, out)` of every adapted module in one layer.
    pub modules: Vec<(u64, u64)>,
    pub rank: u64,
    pub experts: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCount {
    pub stable_experts: u64,
    pub transient: u64,
    pub router: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.stable_experts + self.transient + self.router
    }
}

impl ArchSpec {
    /// All seven projections of a LLaMA-style block: q, k, v, o (`d → d`),
    /// gate, up (`d → m`), down (`m → d`).
    pub fn all_projections(layers: u64, d: u64, m: u64, rank: u64, experts: u64) -> Self {
        let mut modules = vec![(d, d); 4];
        modules.extend([(d, m), (d, m), (m, d)]);
        Self {
            layers,
            modules,
            rank,
            experts,
        }
    }

    /// gate, up, down only.
    pub fn ffn_only(layers: u64, d: u64, m: u64, rank: u64, experts: u64) -> Self {
        Self {
            layers,
            modules: vec![(d, m), (d, m), (m, d)],
            rank,
            experts,
        }
    }

    /// 7B-class backbone, every projection, `r = 32`, `E = 8`.
    pub fn superni() -> Self {
        Self::all_projections(32, 4096, 11008, 32, 8)
    }

    /// 7B-class backbone, FFN only, `r = 16`, `E = 4`.
    pub fn vqa() -> Self {
        Self::ffn_only(32, 4096, 11008, 16, 4)
    }

    /// One `2 × 2` module, rank 1, one expert: 10 parameters in total.
    pub fn trivial() -> Self {
        Self::single(2, 2, 1, 1)
    }

    pub fn single(input: u64, output: u64, rank: u64, experts: u64) -> Self {
        Self {
            layers: 1,
            modules: vec![(input, output)],
            rank,
            experts,
        }
    }
}

pub fn count_trainable_params(arch: &ArchSpec) -> Result<ParamCount> {
    if arch.experts == 0 || arch.rank == 0 {
        return Err(Error::invalid("rank and expert count must be positive"));
    }
    if !arch.rank.is_multiple_of(arch.experts) {
        return Err(Error::invalid(format!(
            "expert count {} does not divide total rank {}",
            arch.experts, arch.rank
        )));
    }
    let r_e = arch.rank / arch.experts;
    let mut per_layer = ParamCount::default();
    for &(input, output) in &arch.modules {
        per_layer.stable_experts += arch.rank * (input + output);
        per_layer.transient += r_e * (input + output);
        per_layer.router += input * arch.experts;
    }
    Ok(ParamCount {
        stable_experts: per_layer.stable_experts * arch.layers,
        transient: per_layer.transient * arch.layers,
        router: per_layer.router * arch.layers,
    })
}
