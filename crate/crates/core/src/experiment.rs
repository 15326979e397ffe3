//! Runs configured variants and seeds and writes their artifacts.
//!
//! Layout: `<out>/<variant>/seed-<s>/{matrix.csv, summary.json, steps.log,
//! checkpoint.v1, manifest.json, expert_load.csv}` plus
//! `<out>/config.resolved.toml`.

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{write_resolved, ExperimentConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{summarize, AccuracyMatrix, Summary};
use crate::taskgen::{make_stream, StreamManifest, TaskStream};
use crate::trainer::{run_stream, Ablation, ContinualState, TaskLog};

pub const SUMMARY_NAME: &str = "summary.json";
pub const MATRIX_NAME: &str = "matrix.csv";
pub const STEPS_NAME: &str = "steps.log";
pub const LOAD_NAME: &str = "expert_load.csv";

/// Contents of `summary.json`. Contains no timings, so identical runs give
/// identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub variant: String,
    pub seed: u64,
    pub ablation: Ablation,
    /// Absent while the stream is only partly trained.
    pub metrics: Option<Summary>,
    pub matrix: AccuracyMatrix,
    /// Routing prior computed at the start of each task (absent when no
    /// warm-up ran).
    pub h_per_task: Vec<Option<Vec<f64>>>,
    pub oracle_accuracy: Vec<f64>,
}

impl SeedSummary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary is serialisable");
        s.push('\n');
        s
    }
}

/// In-memory result of one `(variant, seed)` run.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub summary: SeedSummary,
    pub state: ContinualState,
    /// Logs of the tasks trained in this invocation only.
    pub logs: Vec<TaskLog>,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Evaluation parallelism inside one run.
    pub exec: Exec,
    /// Stop after this many tasks have been trained in total.
    pub stop_after: Option<usize>,
}

pub fn seed_dir(out: &Path, variant: &str, seed: u64) -> PathBuf {
    out.join(variant).join(format!("seed-{seed}"))
}

fn h_of(log: &TaskLog) -> Option<Vec<f64>> {
    log.probe.as_ref().map(|p| p.h.h.clone())
}

/// Builds the stream for `seed`; each seed gets its own embedding and data.
pub fn stream_for(cfg: &ExperimentConfig, seed: u64) -> Result<TaskStream> {
    make_stream(&cfg.stream, seed)
}

/// Trains one variant on one seed, from scratch or from `resume`.
pub fn run_seed(
    cfg: &ExperimentConfig,
    ablation: Ablation,
    seed: u64,
    resume: Option<Checkpoint>,
    opts: RunOptions,
) -> Result<SeedOutcome> {
    let stream = stream_for(cfg, seed)?;
    run_seed_on(cfg, ablation, seed, &stream, resume, opts)
}

pub fn run_seed_on(
    cfg: &ExperimentConfig,
    ablation: Ablation,
    seed: u64,
    stream: &TaskStream,
    resume: Option<Checkpoint>,
    opts: RunOptions,
) -> Result<SeedOutcome> {
    let manifest = stream.manifest();
    let variant = ablation.label();
    let (mut state, mut matrix, mut h_history) = match resume {
        Some(ck) => {
            if !ck.stream.matches(&manifest) {
                return Err(Error::invalid("checkpoint was written for a different task stream"));
            }
            if ck.state.seed() != seed || ck.state.ablation != ablation {
                return Err(Error::invalid(
                    "checkpoint seed or ablation differs from the requested run",
                ));
            }
            (ck.state, ck.matrix, ck.h_history)
        }
        None => (
            ContinualState::new(cfg.model_for_seed(seed), cfg.train.clone(), ablation)?,
            AccuracyMatrix::new(stream.seen.len(), stream.unseen.len()),
            Vec::new(),
        ),
    };
    let stop = opts.stop_after.unwrap_or(usize::MAX);
    let (logs, _) = run_stream(&mut state, stream, &mut matrix, opts.exec, |st, _, _| {
        Ok(if st.tasks_done >= stop {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        })
    })?;
    h_history.extend(logs.iter().map(h_of));

    let metrics = if matrix.completed_stages() == matrix.stages() {
        Some(summarize(&matrix)?)
    } else {
        None
    };
    let checkpoint = Checkpoint::new(variant.clone(), &state, &matrix, h_history.clone(), &manifest);
    Ok(SeedOutcome {
        summary: SeedSummary {
            variant,
            seed,
            ablation,
            metrics,
            matrix,
            h_per_task: h_history,
            oracle_accuracy: manifest.oracle_accuracy.clone(),
        },
        state,
        logs,
        checkpoint,
    })
}

/// Tab-separated per-step log with a header row.
pub fn steps_log(logs: &[TaskLog], lambda: f64, gamma: f64) -> String {
    let mut out =
        String::from("task\tepoch\tstep\tlr\tloss_total\tloss_task\tloss_reg\tloss_aux\tlambda\tgamma\tusage\n");
    for log in logs {
        for s in &log.steps {
            let usage: Vec<String> = s.usage.iter().map(usize::to_string).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                s.task + 1,
                s.epoch + 1,
                s.step,
                s.lr,
                s.terms.total,
                s.terms.task,
                s.terms.reg,
                s.terms.aux,
                lambda,
                gamma,
                usage.join(",")
            );
        }
    }
    out
}

/// Tokens routed to each expert per task, and in total.
pub fn expert_load_csv(logs: &[TaskLog], n_experts: usize) -> String {
    let mut out = String::from("task");
    for e in 0..n_experts {
        let _ = write!(out, ",expert_{}", e + 1);
    }
    out.push('\n');
    let mut total = vec![0usize; n_experts];
    for log in logs {
        let _ = write!(out, "{}", log.task + 1);
        for (t, &l) in total.iter_mut().zip(&log.expert_load) {
            *t += l;
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
    }
    out.push_str("total");
    for t in total {
        let _ = write!(out, ",{t}");
    }
    out.push('\n');
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_seed_artifacts(
    dir: &Path,
    cfg: &ExperimentConfig,
    outcome: &SeedOutcome,
    manifest: &StreamManifest,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(MATRIX_NAME), &outcome.summary.matrix.to_csv())?;
    write(&dir.join(SUMMARY_NAME), &outcome.summary.to_json())?;
    let lambda = if outcome.summary.ablation.te_reg {
        cfg.model.lambda
    } else {
        0.0
    };
    write(
        &dir.join(STEPS_NAME),
        &steps_log(&outcome.logs, lambda, cfg.model.gamma),
    )?;
    write(
        &dir.join(LOAD_NAME),
        &expert_load_csv(&outcome.logs, cfg.model.n_experts),
    )?;
    write(
        &dir.join(checkpoint::MANIFEST_NAME),
        &checkpoint::manifest_json(manifest),
    )?;
    outcome.checkpoint.save(&dir.join(checkpoint::FILE_NAME))
}

/// Every `(variant, seed)` pair of a run, variant-major.
pub fn jobs(variants: &[Ablation], seeds: &[u64]) -> Vec<(Ablation, u64)> {
    variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect()
}

/// Runs all jobs, writing artifacts under `cfg.run.output_dir`. Jobs run in
/// parallel under [`Exec::Parallel`]; each job is sequential inside.
pub fn cmd_run(cfg: &ExperimentConfig, variants: &[Ablation]) -> Result<Vec<SeedSummary>> {
    cfg.validate()?;
    let out = &cfg.run.output_dir;
    write_resolved(cfg, out)?;
    let all = jobs(variants, &cfg.run.seeds);
    let inner = if all.len() == 1 { cfg.run.exec } else { Exec::Sequential };
    let results = cfg.run.exec.map(&all, |&(ablation, seed)| -> Result<SeedSummary> {
        let stream = stream_for(cfg, seed)?;
        let outcome = run_seed_on(
            cfg,
            ablation,
            seed,
            &stream,
            None,
            RunOptions {
                exec: inner,
                stop_after: None,
            },
        )?;
        let dir = seed_dir(out, &ablation.label(), seed);
        write_seed_artifacts(&dir, cfg, &outcome, &stream.manifest())?;
        if let Some(m) = &outcome.summary.metrics {
            log::info!("{} seed {seed}: AP {:.4} AF {:.4}", outcome.summary.variant, m.ap, m.af);
        }
        Ok(outcome.summary)
    });
    results.into_iter().collect()
}

/// Continues an interrupted run from its checkpoint and rewrites the
/// artifacts in the checkpoint's directory.
pub fn cmd_resume(cfg: &ExperimentConfig, checkpoint_path: &Path) -> Result<SeedSummary> {
    let ck = Checkpoint::load(checkpoint_path)?;
    let seed = ck.rng.master_seed;
    let ablation = ck.state.ablation;
    let stream = stream_for(cfg, seed)?;
    let outcome = run_seed_on(
        cfg,
        ablation,
        seed,
        &stream,
        Some(ck),
        RunOptions {
            exec: cfg.run.exec,
            stop_after: None,
        },
    )?;
    let dir = checkpoint_path.parent().unwrap_or(Path::new("."));
    write_seed_artifacts(dir, cfg, &outcome, &stream.manifest())?;
    Ok(outcome.summary)
}
