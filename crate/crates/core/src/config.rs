//! Experiment configuration: a sectioned `key = value` file.
//!
//! ```toml
//! [model]      # ModelConfig
//! lambda = 5000.0
//! [stream]     # StreamConfig
//! sigma = 0.15
//! [train]      # TrainConfig
//! epochs = 5
//! [ablation]   # cp_bias / te_reg / cka_weighting
//! te_reg = false
//! [run]
//! seeds = [0, 1, 2]
//! output_dir = "runs/default"
//! ```
//!
//! Every key has a default; unknown keys are errors. `model.seed` is
//! overwritten by each entry of `run.seeds`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::moe::ModelConfig;
use crate::taskgen::StreamConfig;
use crate::trainer::{Ablation, TrainConfig};

pub const RESOLVED_NAME: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Parallelism across samples and seeds.
    pub exec: Exec,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            output_dir: PathBuf::from("runs/default"),
            exec: Exec::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub stream: StreamConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub run: RunSection,
}

impl ExperimentConfig {
    /// Cross-section constraints, reported as `(key, message)`.
    fn check(&self) -> std::result::Result<(), (String, String)> {
        let split = |e: Error| -> (String, String) {
            let msg = match e {
                Error::Invalid(m) => m,
                other => other.to_string(),
            };
            match msg.split_once(':') {
                Some((k, rest)) if !k.contains(' ') => (k.trim().to_string(), rest.trim().to_string()),
                _ => (String::new(), msg),
            }
        };
        self.model.validate().map_err(split)?;
        self.stream.validate().map_err(split)?;
        self.train.validate().map_err(split)?;
        if self.model.d_in != self.stream.dim {
            return Err((
                "d_in".into(),
                format!(
                    "model.d_in = {} must equal stream.dim = {}",
                    self.model.d_in, self.stream.dim
                ),
            ));
        }
        if self.model.n_classes != self.stream.n_classes {
            return Err((
                "n_classes".into(),
                format!(
                    "model.n_classes = {} must equal stream.n_classes = {}",
                    self.model.n_classes, self.stream.n_classes
                ),
            ));
        }
        if self.run.seeds.is_empty() {
            return Err(("seeds".into(), "at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(key, message)| Error::Config { key, line: 0, message })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    /// Model config for one seed of the run.
    pub fn model_for_seed(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            seed,
            ..self.model.clone()
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the first `key = …` assignment, or 0 if the key is absent.
fn line_of_key(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| {
            l.trim_start()
                .strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map_or(0, |i| i + 1)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |s| line_of(text, s.start));
        let message = e.message().to_string();
        let key = message
            .split('`')
            .nth(1)
            .map(str::to_string)
            .or_else(|| {
                e.span()
                    .map(|s| text[s].split('=').next().unwrap_or("").trim().to_string())
            })
            .unwrap_or_default();
        Error::Config { key, line, message }
    })?;
    cfg.check().map_err(|(key, message)| Error::Config {
        line: line_of_key(text, &key),
        key,
        message,
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Writes the fully resolved configuration next to the run outputs.
pub fn write_resolved(cfg: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(RESOLVED_NAME);
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
