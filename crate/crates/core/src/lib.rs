//! Consistency-preserving mixture-of-experts continual learning at desk scale.
//!
//! A frozen two-layer network carries a pool of low-rank experts behind a
//! sparse router. At the start of every task a disposable transient expert
//! is warmed up with plain gradient descent; its trajectory yields a
//! per-parameter importance mask and its outputs, compared against each
//! stable expert through linear CKA, yield consistency scores. The scores
//! bias routing during training and weight how much of the importance mask
//! each expert absorbs once the task is done.
//!
//! Module map:
//!
//! | module | contents |
//! |---|---|
//! | [`numerics`] | dense matrices, softmax, centring |
//! | [`moe`] | backbone, experts, router, forward/backward, parameter counts |
//! | [`probe`] | transient warm-up, importance, CKA |
//! | [`consolidation`] | importance accumulation, regulariser, load balancing |
//! | [`trainer`] | optimiser, per-task loop, stream loop, evaluation |
//! | [`taskgen`] | synthetic rotated-subspace task streams |
//! | [`metrics`] | accuracy matrix, AP / AF / ZST |
//! | [`oracles`] | quadratic closed-form check, finite differences |
//! | [`config`], [`checkpoint`], [`experiment`], [`report`] | the run surface used by the CLI |

pub mod checkpoint;
pub mod config;
pub mod consolidation;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod metrics;
pub mod moe;
pub mod numerics;
pub mod oracles;
pub mod probe;
pub mod report;
pub mod seed;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
pub use numerics::Matrix;
