//! `blamebox`: run scenarios, train and evaluate detectors, localize bugs in
//! recorded studies, and re-render reports.
//!
//! Exit status is 0 on success, 1 for invalid input or configuration and 2 for
//! filesystem errors. Set `BLAMEBOX_THREADS` to cap worker threads.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use blamebox_core::harness::{build_study, ScenarioConfig};
use blamebox_core::mom::MomConfig;
use blamebox_core::planner::SkillExecutor;
use blamebox_core::report::{likelihood_csv, read_trace};
use blamebox_core::store::{self, ReplayExecutor, StoredModel, Study};
use blamebox_core::{run_testing_loop, ReportBundle, SkillId};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

const THREADS_VAR: &str = "BLAMEBOX_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "blamebox",
    version,
    about = "Bayesian fault localization by active skill testing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a built-in or file-defined scenario against the simulator.
    Simulate {
        /// Built-in scenario name or path to a scenario JSON file.
        #[arg(long)]
        scenario: String,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the study (databases, models, recordings) to OUT/study.
        #[arg(long)]
        save_study: bool,
        /// Recorded executions per skill when saving the study.
        #[arg(long, default_value_t = 20)]
        recordings: usize,
    },
    /// Train a sensor detector on an experience database.
    TrainMom {
        #[arg(long)]
        db: PathBuf,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        bottleneck: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score every sequence of a database with a trained detector.
    EvalMom {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the testing loop on a saved study.
    Localize {
        #[arg(long)]
        study: PathBuf,
        #[arg(long, value_enum, default_value_t = ExecutorKind::Replay)]
        executor: ExecutorKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render the report files from a trace.
    Report {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ExecutorKind {
    Replay,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Joins the error chain, skipping causes the outer message already repeats.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let io = e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>().is_some()
            || c.downcast_ref::<blamebox_core::Error>().is_some_and(|e| e.is_io())
    });
    if io {
        2
    } else {
        1
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("{THREADS_VAR} must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Simulate {
            scenario,
            seed,
            out,
            save_study,
            recordings,
        } => simulate(&scenario, seed, &out, save_study, recordings),
        Command::TrainMom {
            db,
            out,
            epochs,
            bottleneck,
            seed,
        } => train_mom(&db, &out, epochs, bottleneck, seed),
        Command::EvalMom { model, db, out } => eval_mom(&model, &db, &out),
        Command::Localize { study, executor, out } => localize(&study, executor, &out),
        Command::Report { trace, out } => report(&trace, &out),
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

/// `run.json` for a command; the resolved settings are enough to rerun it.
fn run_record(command: &str, settings: Value) -> Value {
    json!({
        "tool": "blamebox",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "settings": settings,
    })
}

fn simulate(scenario: &str, seed: Option<u64>, out: &Path, save_study: bool, recordings: usize) -> anyhow::Result<()> {
    let mut config = ScenarioConfig::resolve(scenario)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if save_study && recordings == 0 {
        bail!("--recordings must be at least 1 when saving a study");
    }
    let sim = build_study(&config)?;
    let mut executor = sim.executor();
    let (_, trace) = run_testing_loop(&mut executor, sim.registry(), &sim.skills, &sim.blame, &sim.planner)?;

    create_dir(out)?;
    ReportBundle::from_trace(&trace, &[])?.write(out)?;
    if save_study {
        // A fresh simulator, so recordings do not depend on the loop's choices.
        let mut recorder = sim.executor();
        let mut recorded = vec![Vec::with_capacity(recordings); sim.skills.len()];
        for _ in 0..recordings {
            for (i, pool) in recorded.iter_mut().enumerate() {
                pool.push(recorder.execute(SkillId(i))?);
            }
        }
        let study = Study {
            registry: sim.registry().clone(),
            skills: sim.skills.clone(),
            recordings: recorded,
            blame: sim.blame,
            planner: sim.planner,
        };
        store::save_study(&out.join("study"), &study)?;
    }
    write_json(
        &out.join("run.json"),
        &run_record(
            "simulate",
            json!({
                "scenario": config,
                "seed": config.seed,
                "save_study": save_study,
                "recordings": recordings,
            }),
        ),
    )
}

fn train_mom(
    db_dir: &Path,
    out: &Path,
    epochs: Option<usize>,
    bottleneck: Option<usize>,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let (_, db) = store::load_db(db_dir)?;
    let sensors: Vec<_> = db.observations().iter().map(|o| o.sensors.clone()).collect();
    if sensors.iter().all(|s| s.data().iter().all(|&v| v == 0.0)) {
        bail!("{}: database holds no sensor data", db_dir.display());
    }
    let defaults = MomConfig::default();
    let config = MomConfig {
        epochs: epochs.unwrap_or(defaults.epochs),
        bottleneck: bottleneck.unwrap_or(defaults.bottleneck),
        seed: seed.unwrap_or(defaults.seed),
        ..defaults
    };
    config.validate()?;
    let (detector, losses) = blamebox_core::MomDetector::fit(&sensors, &config)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    store::save_model(out, &StoredModel::Mom(detector))?;
    write_json(
        &sidecar(out),
        &run_record(
            "train-mom",
            json!({
                "db": db_dir,
                "out": out,
                "mom": config,
                "final_loss": losses.last(),
            }),
        ),
    )
}

/// `model.json` -> `model.run.json`, next to the model it describes.
fn sidecar(model: &Path) -> PathBuf {
    let stem = model
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    model.with_file_name(format!("{stem}.run.json"))
}

fn eval_mom(model: &Path, db_dir: &Path, out: &Path) -> anyhow::Result<()> {
    let detector = store::load_mom(model)?;
    let (_, db) = store::load_db(db_dir)?;
    let mut rows = Vec::new();
    let mut detections = Vec::new();
    for (i, obs) in db.observations().iter().enumerate() {
        let d = detector.detect(&obs.sensors)?;
        let label = format!("seq_{i}");
        detections.push(json!({ "sequence": label, "t_fail": d.t_fail }));
        rows.push((label, d.likelihood));
    }
    create_dir(out)?;
    let path = out.join("mom_likelihood.csv");
    fs::write(&path, likelihood_csv(&rows)).with_context(|| format!("writing {}", path.display()))?;
    write_json(&out.join("detections.json"), &Value::Array(detections))?;
    write_json(
        &out.join("run.json"),
        &run_record("eval-mom", json!({ "model": model, "db": db_dir })),
    )
}

fn localize(study_dir: &Path, executor: ExecutorKind, out: &Path) -> anyhow::Result<()> {
    let study = store::load_study(study_dir)?;
    let mut replay = match executor {
        ExecutorKind::Replay => ReplayExecutor::new(study.recordings.clone()),
    };
    let (_, trace) = run_testing_loop(
        &mut replay,
        &study.registry,
        &study.skills,
        &study.blame,
        &study.planner,
    )?;
    create_dir(out)?;
    ReportBundle::from_trace(&trace, &[])?.write(out)?;
    write_json(
        &out.join("run.json"),
        &run_record(
            "localize",
            json!({
                "study": study_dir,
                "executor": executor,
                "blame": study.blame,
                "planner": study.planner,
            }),
        ),
    )
}

fn report(trace_path: &Path, out: &Path) -> anyhow::Result<()> {
    let trace = read_trace(trace_path)?;
    create_dir(out)?;
    ReportBundle::from_trace(&trace, &[])?.write(out)?;
    write_json(
        &out.join("run.json"),
        &run_record("report", json!({ "trace": trace_path })),
    )
}
