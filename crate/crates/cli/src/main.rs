use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cpmoe::config::{load_config, parse_config, ExperimentConfig};
use cpmoe::exec::Exec;
use cpmoe::experiment::{cmd_resume, cmd_run, run_seed, RunOptions};
use cpmoe::moe::{count_trainable_params, ArchSpec};
use cpmoe::oracles::{tiny_gradcheck, verify_closed_form};
use cpmoe::report::cmd_report;
use cpmoe::trainer::{probe_task, Ablation};
use cpmoe::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "cpmoe",
    version,
    about = "Continual learning with consistency-preserving mixture-of-experts adapters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Sectioned key = value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `run.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured variants and seeds and write artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        /// Components to switch off, comma separated (cp_bias, te_reg,
        /// cka_weighting). Repeat for several variants; `none` keeps the
        /// config's switches.
        #[arg(long)]
        ablate: Vec<String>,
        /// Continue from a checkpoint.v1 file instead of starting fresh.
        #[arg(long, conflicts_with = "ablate")]
        resume: Option<PathBuf>,
        /// Run everything on the calling thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Render a markdown summary of a run directory.
    Report {
        run_dir: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train up to a task, then print that task's warm-up probe as JSON.
    Probe {
        #[command(flatten)]
        common: Common,
        /// 1-based task to probe.
        #[arg(long, default_value_t = 2)]
        task: usize,
    },
    /// Check the closed-form multi-step displacement against simulated GD.
    #[command(name = "verify-theorem1")]
    VerifyClosedForm {
        #[arg(long, default_value_t = 100)]
        problems: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of the full training objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Count adapter parameters for a preset or an explicit architecture.
    CountParams(CountArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Superni,
    Vqa,
    Trivial,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long, conflicts_with_all = ["layers", "modules", "rank", "experts"])]
    preset: Option<Preset>,
    #[arg(long)]
    layers: Option<u64>,
    /// Adapted projections as `in:out`, comma separated.
    #[arg(long)]
    modules: Option<String>,
    #[arg(long)]
    rank: Option<u64>,
    #[arg(long)]
    experts: Option<u64>,
    /// Backbone size the percentage refers to.
    #[arg(long, default_value_t = 6.7e9)]
    backbone: f64,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NumericalAbort { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn load(common: &Common) -> cpmoe::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => parse_config("")?,
    };
    if let Some(s) = common.seed {
        cfg.run.seeds = vec![s];
    }
    if let Some(o) = &common.out {
        cfg.run.output_dir = o.clone();
    }
    Ok(cfg)
}

fn variants(base: Ablation, ablate: &[String]) -> cpmoe::Result<Vec<Ablation>> {
    if ablate.is_empty() {
        return Ok(vec![base]);
    }
    let mut out: Vec<Ablation> = Vec::new();
    for spec in ablate {
        let v = if spec == "none" { base } else { base.disable(spec)? };
        if !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

fn parse_modules(text: &str) -> cpmoe::Result<Vec<(u64, u64)>> {
    text.split(',')
        .map(|m| {
            let (a, b) = m
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("module `{m}` is not in:out")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|e| Error::invalid(format!("module `{m}`: {e}")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

fn arch(args: &CountArgs) -> cpmoe::Result<ArchSpec> {
    match args.preset {
        Some(Preset::Superni) => Ok(ArchSpec::superni()),
        Some(Preset::Vqa) => Ok(ArchSpec::vqa()),
        Some(Preset::Trivial) => Ok(ArchSpec::trivial()),
        None => {
            let need = |v: Option<u64>, name: &str| {
                v.ok_or_else(|| Error::invalid(format!("--{name} is required without --preset")))
            };
            let modules = parse_modules(
                args.modules
                    .as_deref()
                    .ok_or_else(|| Error::invalid("--modules is required without --preset"))?,
            )?;
            Ok(ArchSpec {
                layers: need(args.layers, "layers")?,
                modules,
                rank: need(args.rank, "rank")?,
                experts: need(args.experts, "experts")?,
            })
        }
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> cpmoe::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> cpmoe::Result<ExitCode> {
    match cli.command {
        Command::Run {
            common,
            ablate,
            resume,
            sequential,
        } => {
            let mut cfg = load(&common)?;
            if sequential {
                cfg.run.exec = Exec::Sequential;
            }
            if let Some(ck) = resume {
                let s = cmd_resume(&cfg, &ck)?;
                println!("{}", serde_json::to_string(&s.metrics).expect("serialisable"));
                return Ok(ExitCode::SUCCESS);
            }
            let vs = variants(cfg.ablation, &ablate)?;
            for s in cmd_run(&cfg, &vs)? {
                if let Some(m) = s.metrics {
                    println!(
                        "{:<16} seed {:<4} AP {:.4}  AF {:.4}  ZST {}",
                        s.variant,
                        s.seed,
                        m.ap,
                        m.af,
                        m.zst.map_or("n/a".into(), |z| format!("{z:.4}"))
                    );
                }
            }
            println!("artifacts in {}", cfg.run.output_dir.display());
        }
        Command::Report { run_dir, out } => {
            write_or_print(out.as_deref(), &cmd_report(&run_dir)?)?;
        }
        Command::Probe { common, task } => {
            let cfg = load(&common)?;
            if task == 0 || task > cfg.stream.seen_tasks {
                return Err(Error::invalid(format!(
                    "--task must be in 1..={}",
                    cfg.stream.seen_tasks
                )));
            }
            let seed = cfg.run.seeds[0];
            let stream = cpmoe::experiment::stream_for(&cfg, seed)?;
            let before = run_seed(
                &cfg,
                cfg.ablation,
                seed,
                None,
                RunOptions {
                    exec: cfg.run.exec,
                    stop_after: Some(task - 1),
                },
            )?;
            let state = if task == 1 {
                cpmoe::trainer::ContinualState::new(cfg.model_for_seed(seed), cfg.train.clone(), cfg.ablation)?
            } else {
                before.state
            };
            let report = probe_task(&state, task - 1, &stream.seen[task - 1].train)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serialisable"));
        }
        Command::VerifyClosedForm { problems, seed } => {
            let r = verify_closed_form(problems, seed, Exec::default())?;
            println!("problem    d     S  rel error");
            for (i, (d, s, e)) in r.per_problem.iter().enumerate() {
                println!("{:>7} {d:>4} {s:>5}  {e:.3e}", i + 1);
            }
            println!("problems               {}", r.problems);
            println!("max relative error     {:.3e}  (≤ 1e-8)", r.max_rel_error);
            println!("H = 0 gives −ηSg       {}", r.zero_curvature_exact);
            println!("S = 1e4 vs −H⁻¹g       {:.3e}  (≤ 1e-6)", r.limit_rel_error);
            if !r.passes() {
                println!("FAIL");
                return Ok(ExitCode::from(EXIT_NUMERIC));
            }
            println!("PASS");
        }
        Command::Gradcheck { seed, step } => {
            let reports = tiny_gradcheck(seed, step)?;
            let mut ok = true;
            for r in &reports {
                let pass = r.max_rel_error < 1e-4;
                ok &= pass;
                println!(
                    "{:<10} {:>4} entries  max rel err {:.3e}  {}",
                    r.group,
                    r.entries,
                    r.max_rel_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            if !ok {
                return Ok(ExitCode::from(EXIT_NUMERIC));
            }
        }
        Command::CountParams(args) => {
            let spec = arch(&args)?;
            let c = count_trainable_params(&spec)?;
            println!("{}", c.total());
            println!("stable experts {}", c.stable_experts);
            println!("transient      {}", c.transient);
            println!("router         {}", c.router);
            println!(
                "{:.2}% of a {} parameter backbone",
                100.0 * c.total() as f64 / args.backbone,
                args.backbone
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
