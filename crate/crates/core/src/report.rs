//! Markdown summaries of a run directory.
//!
//! Metrics are recomputed from the accuracy matrix stored in each
//! `summary.json` rather than copied from it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::{SeedSummary, SUMMARY_NAME};
use crate::metrics::{summarize, Summary};
use crate::trainer::Ablation;

/// Canonical row order of the ablation table, baseline first.
const VARIANT_ORDER: [&str; 6] = [
    "vanilla",
    "cp_bias-only",
    "te_reg-only-uniform-h",
    "te_reg-only",
    "full-uniform-h",
    "full",
];

#[derive(Debug, Clone, PartialEq)]
pub struct VariantRows {
    pub variant: String,
    pub ablation: Ablation,
    /// `(seed, metrics)`, sorted by seed.
    pub seeds: Vec<(u64, Summary)>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Reads every `<variant>/seed-*/summary.json` under `run_dir`.
pub fn collect(run_dir: &Path) -> Result<Vec<VariantRows>> {
    let mut variants = Vec::new();
    for vdir in sorted_dirs(run_dir)? {
        let mut rows: Vec<(u64, Summary)> = Vec::new();
        let mut meta: Option<(String, Ablation)> = None;
        for sdir in sorted_dirs(&vdir)? {
            let path = sdir.join(SUMMARY_NAME);
            if !path.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let s: SeedSummary =
                serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            if s.matrix.completed_stages() != s.matrix.stages() {
                return Err(Error::Format(format!("{}: run is incomplete", path.display())));
            }
            rows.push((s.seed, summarize(&s.matrix)?));
            meta.get_or_insert((s.variant, s.ablation));
        }
        if let Some((variant, ablation)) = meta {
            rows.sort_by_key(|r| r.0);
            variants.push(VariantRows {
                variant,
                ablation,
                seeds: rows,
            });
        }
    }
    if variants.is_empty() {
        return Err(Error::Format(format!(
            "no {SUMMARY_NAME} found under {}",
            run_dir.display()
        )));
    }
    variants.sort_by_key(|v| {
        (
            VARIANT_ORDER.iter().position(|n| *n == v.variant).unwrap_or(usize::MAX),
            v.variant.clone(),
        )
    });
    Ok(variants)
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn pm(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{} ± {}", pct(m), pct(s))
}

fn zst_cell(z: Option<f64>) -> String {
    z.map_or_else(|| "n/a".into(), pct)
}

fn column(rows: &[(u64, Summary)], f: impl Fn(&Summary) -> Option<f64>) -> Option<Vec<f64>> {
    rows.iter().map(|(_, s)| f(s)).collect()
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "✗"
    }
}

/// Renders per-seed tables for every variant, plus an ablation table when
/// more than one variant is present. Values are percentages.
pub fn render(variants: &[VariantRows]) -> String {
    let mut out = String::from("# Continual-learning report\n\nAll values in %. AF uses the just-learned accuracy as reference; AF (best) uses the historical maximum.\n");
    for v in variants {
        let _ = write!(out, "\n## {}\n\n", v.variant);
        out.push_str("| seed | AP | AF | AF (best) | ZST |\n|---:|---:|---:|---:|---:|\n");
        for (seed, s) in &v.seeds {
            let _ = writeln!(
                out,
                "| {seed} | {} | {} | {} | {} |",
                pct(s.ap),
                pct(s.af),
                pct(s.af_best),
                zst_cell(s.zst)
            );
        }
        let ap = column(&v.seeds, |s| Some(s.ap)).unwrap_or_default();
        let af = column(&v.seeds, |s| Some(s.af)).unwrap_or_default();
        let afb = column(&v.seeds, |s| Some(s.af_best)).unwrap_or_default();
        let zst = column(&v.seeds, |s| s.zst).map_or_else(|| "n/a".into(), |z| pm(&z));
        let _ = writeln!(out, "| mean ± std | {} | {} | {} | {zst} |", pm(&ap), pm(&af), pm(&afb));
    }
    if variants.len() > 1 {
        out.push_str("\n## Ablation\n\n| CP bias | TE reg | CKA mask | variant | seeds | AP | AF | ZST |\n|:-:|:-:|:-:|---|---:|---:|---:|---:|\n");
        for v in variants {
            let ap = column(&v.seeds, |s| Some(s.ap)).unwrap_or_default();
            let af = column(&v.seeds, |s| Some(s.af)).unwrap_or_default();
            let zst = column(&v.seeds, |s| s.zst).map_or_else(|| "n/a".into(), |z| pm(&z));
            let a = v.ablation;
            let cka = if a.te_reg { mark(a.cka_weighting) } else { "–" };
            let _ = writeln!(
                out,
                "| {} | {} | {cka} | {} | {} | {} | {} | {zst} |",
                mark(a.cp_bias),
                mark(a.te_reg),
                v.variant,
                v.seeds.len(),
                pm(&ap),
                pm(&af),
            );
        }
    }
    out
}

pub fn cmd_report(run_dir: &Path) -> Result<String> {
    Ok(render(&collect(run_dir)?))
}
