//! Versioned JSON checkpoints.
//!
//! Every random draw is a pure function of the master seed and a
//! `(stream, index)` key, so the whole RNG state is the seed plus the index of
//! the next task. Matrices are stored as `{rows, cols, data}` with flat float
//! arrays; floats are written in shortest round-trip form, so a save → load →
//! save cycle is byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::taskgen::{StreamConfig, StreamManifest};
use crate::trainer::ContinualState;

pub const FORMAT: &str = "cpmoe.checkpoint.v1";
pub const FILE_NAME: &str = "checkpoint.v1";
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub master_seed: u64,
    pub next_task: usize,
}

/// Enough to regenerate the task stream and check it is the same one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRef {
    pub config: StreamConfig,
    pub seed: u64,
    pub manifest_file: String,
    pub manifest_sha256: String,
}

impl StreamRef {
    pub fn new(manifest: &StreamManifest) -> Self {
        Self {
            config: manifest.config.clone(),
            seed: manifest.seed,
            manifest_file: MANIFEST_NAME.into(),
            manifest_sha256: manifest_digest(manifest),
        }
    }

    pub fn matches(&self, manifest: &StreamManifest) -> bool {
        self.manifest_sha256 == manifest_digest(manifest)
    }
}

pub fn manifest_json(manifest: &StreamManifest) -> String {
    let mut s = serde_json::to_string_pretty(manifest).expect("manifest is serialisable");
    s.push('\n');
    s
}

fn manifest_digest(manifest: &StreamManifest) -> String {
    let digest = Sha256::digest(manifest_json(manifest).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub variant: String,
    pub state: ContinualState,
    pub matrix: AccuracyMatrix,
    /// Routing prior produced at each completed task, if any.
    pub h_history: Vec<Option<Vec<f64>>>,
    pub stream: StreamRef,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(
        variant: String,
        state: &ContinualState,
        matrix: &AccuracyMatrix,
        h_history: Vec<Option<Vec<f64>>>,
        manifest: &StreamManifest,
    ) -> Self {
        Self {
            format: FORMAT.into(),
            variant,
            state: state.clone(),
            matrix: matrix.clone(),
            h_history,
            stream: StreamRef::new(manifest),
            rng: RngState {
                master_seed: state.seed(),
                next_task: state.tasks_done,
            },
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint is serialisable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            format: String,
        }
        let probe: Probe = serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if probe.format != FORMAT {
            return Err(Error::Format(format!(
                "unsupported checkpoint format `{}` (expected `{FORMAT}`)",
                probe.format
            )));
        }
        let ck: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        if ck.rng.master_seed != ck.state.seed() || ck.rng.next_task != ck.state.tasks_done {
            return Err(Error::Format("checkpoint rng cursor disagrees with its state".into()));
        }
        if ck.state.model.backbone.hash() != ck.state.backbone_hash {
            return Err(Error::Format(
                "checkpoint backbone does not match its recorded hash".into(),
            ));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
