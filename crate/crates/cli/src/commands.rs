use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use aapl_core::data::{generate_dataset, split_base_new, Dataset, ShiftConfig, SplitPlan};
use aapl_core::eval::{
    all_classes_plan, evaluate_base_to_new, evaluate_cross_dataset, evaluate_domain_shift,
    export_profile, profile_checkpoint, EvalReport, Protocol,
};
use aapl_core::gradcheck::{run_suite, GradcheckSummary};
use aapl_core::train::{run_seeded_ensemble, train_loop, Checkpoint, TrainConfig};

use crate::config::{ExperimentConfig, RESOLVED_CONFIG_FILE};
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ENSEMBLE_FILE: &str = "ensemble.json";

/// Replica parallelism from `AAPL_LAB_THREADS`; 1 when unset.
pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("AAPL_LAB_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("AAPL_LAB_THREADS must be a positive integer, got '{v}'"))),
    }
}

pub fn source_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    Ok(generate_dataset(&cfg.dataset, cfg.train.seeds.data)?)
}

pub fn training_plan(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<SplitPlan, CliError> {
    Ok(match cfg.protocol {
        Protocol::BaseToNew => split_base_new(dataset, cfg.train.shots, cfg.split_seed())?,
        Protocol::CrossDataset | Protocol::DomainShift => all_classes_plan(dataset, cfg.train.shots),
    })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(aapl_core::Error::from)?;
    }
    fs::write(path, contents).map_err(aapl_core::Error::from)?;
    Ok(())
}

fn write_run(ckpt: &Checkpoint, dir: &Path) -> Result<(), CliError> {
    write_file(&dir.join(CHECKPOINT_FILE), ckpt.to_json()?.as_bytes())?;
    let mut csv = Vec::new();
    ckpt.write_metrics_csv(&mut csv)?;
    write_file(&dir.join(METRICS_FILE), &csv)
}

pub struct TrainOutcome {
    pub files: Vec<PathBuf>,
    pub final_losses: Vec<f64>,
}

/// Trains one run, or `replicas` seeded replicas under `out/replica-<i>`.
pub fn train(cfg: &ExperimentConfig, out: &Path, replicas: usize, threads: usize) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let dataset = source_dataset(cfg)?;
    let plan = training_plan(cfg, &dataset)?;
    let mut files = vec![cfg.write_resolved(out)?];
    if replicas <= 1 {
        let ckpt = train_loop(&cfg.train, &dataset, &plan)?;
        write_run(&ckpt, out)?;
        files.extend([out.join(CHECKPOINT_FILE), out.join(METRICS_FILE)]);
        let last = ckpt.history.last().map_or(f64::NAN, |m| m.total);
        return Ok(TrainOutcome {
            files,
            final_losses: vec![last],
        });
    }
    let base_init = cfg.train.seeds.init;
    let job = |replica: &TrainConfig| {
        let ckpt = train_loop(replica, &dataset, &plan)?;
        let index = replica.seeds.init.wrapping_sub(base_init);
        write_run(&ckpt, &out.join(format!("replica-{index}")))
            .map_err(|e| aapl_core::Error::Config(e.to_string()))?;
        let last = ckpt.history.last().copied();
        let mut metrics = BTreeMap::new();
        metrics.insert("final_ce".to_string(), last.map_or(f64::NAN, |m| m.ce));
        metrics.insert("final_adtriplet".to_string(), last.map_or(f64::NAN, |m| m.adtriplet));
        metrics.insert("final_total".to_string(), last.map_or(f64::NAN, |m| m.total));
        Ok(metrics)
    };
    let summary = run_seeded_ensemble(&cfg.train, replicas, threads, job)?;
    let mut text = serde_json::to_string_pretty(&summary).map_err(aapl_core::Error::from)?;
    text.push('\n');
    write_file(&out.join(ENSEMBLE_FILE), text.as_bytes())?;
    for i in 0..replicas {
        let dir = out.join(format!("replica-{i}"));
        files.extend([dir.join(CHECKPOINT_FILE), dir.join(METRICS_FILE)]);
    }
    files.push(out.join(ENSEMBLE_FILE));
    Ok(TrainOutcome {
        files,
        final_losses: summary.per_seed.iter().map(|m| m["final_total"]).collect(),
    })
}

/// The experiment config of a checkpoint: `explicit` if given, otherwise
/// the resolved config stored next to it.
pub fn config_for_checkpoint(checkpoint: &Path, explicit: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(RESOLVED_CONFIG_FILE),
    };
    ExperimentConfig::load(&path)
}

/// Loads a checkpoint and regenerates its training dataset, checking that
/// the two agree.
pub fn load_run(checkpoint: &Path, cfg: &ExperimentConfig) -> Result<(Checkpoint, Dataset), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = source_dataset(cfg)?;
    if dataset.fingerprint() != ckpt.dataset_fingerprint {
        return Err(CliError::Config(format!(
            "{}: the configured dataset does not match the one the checkpoint was trained on",
            checkpoint.display()
        )));
    }
    Ok((ckpt, dataset))
}

fn select<'a, T>(items: &'a [T], label: impl Fn(&T) -> String, wanted: &[String]) -> Result<Vec<&'a T>, CliError> {
    if wanted.is_empty() {
        return Ok(items.iter().collect());
    }
    wanted
        .iter()
        .map(|w| {
            items.iter().find(|t| &label(t) == w).ok_or_else(|| {
                let known: Vec<String> = items.iter().map(&label).collect();
                CliError::Config(format!("unknown target '{w}'; configured: {}", known.join(", ")))
            })
        })
        .collect()
}

/// Runs `protocol` on a trained checkpoint. `targets` filters the
/// configured targets (or shifts) by name; the source dataset's own name
/// selects it as a cross-dataset target.
pub fn evaluate(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    protocol: Protocol,
    targets: &[String],
) -> Result<EvalReport, CliError> {
    match protocol {
        Protocol::BaseToNew => {
            if !targets.is_empty() {
                return Err(CliError::Config("base-to-new takes no targets".into()));
            }
            let plan = split_base_new(dataset, ckpt.config.shots, cfg.split_seed())?;
            Ok(evaluate_base_to_new(ckpt, dataset, &plan)?)
        }
        Protocol::CrossDataset => {
            let mut pool = vec![dataset.clone()];
            for (i, t) in cfg.targets.iter().enumerate() {
                pool.push(generate_dataset(t, cfg.target_seed(i))?);
            }
            let chosen: Vec<Dataset> = if targets.is_empty() {
                pool[1..].to_vec()
            } else {
                select(&pool, |d| d.name.clone(), targets)?.into_iter().cloned().collect()
            };
            Ok(evaluate_cross_dataset(ckpt, dataset, &chosen)?)
        }
        Protocol::DomainShift => {
            let chosen: Vec<ShiftConfig> = select(&cfg.shifts, ShiftConfig::label, targets)?
                .into_iter()
                .cloned()
                .collect();
            Ok(evaluate_domain_shift(ckpt, dataset, &chosen, cfg.train.seeds.data)?)
        }
    }
}

pub fn write_report(report: &EvalReport, cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files = vec![cfg.write_resolved(out)?];
    files.extend(report.export(out)?);
    Ok(files)
}

pub fn profile(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    n_points: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let profile = profile_checkpoint(ckpt, dataset, n_points, seed)?;
    let mut files = vec![cfg.write_resolved(out)?];
    files.extend(export_profile(&profile, out)?);
    Ok(files)
}

pub fn gradcheck(seed: u64) -> Result<GradcheckSummary, CliError> {
    Ok(run_suite(seed)?)
}

pub fn print_gradcheck(summary: &GradcheckSummary, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{:<24} {:>6} {:>14}  result", "check", "points", "max_rel_error")?;
    for row in &summary.rows {
        let verdict = if row.passed() { "ok" } else { "FAIL" };
        writeln!(out, "{:<24} {:>6} {:>14.3e}  {verdict}", row.name, row.points, row.max_rel_error)?;
    }
    let passed = summary.rows.iter().filter(|r| r.passed()).count();
    writeln!(
        out,
        "{passed}/{} checks below {:e} (seed {})",
        summary.rows.len(),
        summary.tolerance,
        summary.seed
    )
}
