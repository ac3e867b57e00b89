//! `train`: one run from a config document, with its artifacts and manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use generalist_core::config::RunConfig;
use generalist_core::eval::EvalReport;
use generalist_core::trainer::{EpochMetrics, WaMetrics};
use generalist_core::{checkpoint, run, run_baseline, Dataset, Method, MetricsReport, ModelInstance, Monitor};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.json";
pub const PER_CLASS: &str = "per_class.csv";
pub const RESOLVED: &str = "resolved_config.toml";

/// Artifact file names, relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint: Option<String>,
    pub metrics: String,
    pub summary: Option<String>,
    pub per_class: Option<String>,
    pub config: String,
}

/// Wall-clock seconds per phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub load_secs: f64,
    pub train_secs: f64,
    pub write_secs: f64,
    pub total_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
    /// Resolved config with every default filled in.
    pub config: RunConfig,
    pub artifacts: Artifacts,
    /// Every file written by the run, this manifest included.
    pub files: Vec<String>,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub timings: Timings,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: not a run manifest: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub seed: u64,
    pub steps: u64,
    pub final_eval: Option<EvalReport>,
    pub wa: Vec<WaMetrics>,
}

#[derive(Serialize)]
struct PerClassRow {
    class: usize,
    count: usize,
    clean_correct: usize,
    robust_correct: Option<usize>,
}

/// What a finished run hands back to `sweep`.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub manifest: RunManifest,
    pub summary: Option<Summary>,
}

pub(crate) fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::output(path, e))?;
    text.push('\n');
    write_file(path, text)
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::output(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| CliError::output(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<(), CliError> {
    if rows.is_empty() {
        // Header only, so a failed first epoch still leaves a parseable file.
        let header = "epoch,gamma,lr_n,lr_r,clean_acc,robust_acc,loss_n,loss_r,communicated\n";
        return write_file(path, header);
    }
    write_csv(path, rows)
}

fn per_class_rows(report: &EvalReport) -> Vec<PerClassRow> {
    (0..report.class_counts.len())
        .map(|k| PerClassRow {
            class: k,
            count: report.class_counts[k],
            clean_correct: report.per_class_correct[k],
            robust_correct: report.robust.as_ref().map(|r| r.per_class_correct[k]),
        })
        .collect()
}

/// Test split restricted to the configured evaluation limit.
pub fn eval_split(config: &RunConfig, test: Dataset) -> Dataset {
    match config.eval.limit {
        Some(n) => test.take(n),
        None => test,
    }
}

/// Loads data, trains and writes every artifact into `out`.
pub fn train(config: RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let mut config = config;
    let (train, test) = config.data.load()?;
    config.materialize(&train);
    let g = config.generalist_config()?;
    let test = eval_split(&config, test);
    let load_secs = started.elapsed().as_secs_f64();

    let monitor = Monitor {
        data: &test,
        attack: config.eval_attack(),
        seed: config.eval.seed,
        every: config.eval.every,
    };
    let t_train = Instant::now();
    let result = match config.method {
        Method::Generalist => run(&g, &train, &train, Some(&monitor)),
        m => run_baseline(m, &g, &train, Some(&monitor)),
    };
    let train_secs = t_train.elapsed().as_secs_f64();

    let t_write = Instant::now();
    create_dir(out)?;
    let mut files = Vec::new();
    let mut put = |name: &str| {
        files.push(name.to_string());
        out.join(name)
    };
    write_file(&put(RESOLVED), config.to_toml())?;

    let (params, report, failure) = match result {
        Ok((params, report)) => (Some(params), report, None),
        Err(e) => (None, *e.report, Some(e.source)),
    };
    write_metrics(&put(METRICS), &report.rows)?;

    let mut artifacts = Artifacts {
        checkpoint: None,
        metrics: METRICS.into(),
        summary: None,
        per_class: None,
        config: RESOLVED.into(),
    };
    let mut summary = None;
    if let Some(params) = params {
        let model = ModelInstance::new(g.model.clone(), params).map_err(generalist_core::TrainError::from)?;
        checkpoint::save(&put(CHECKPOINT), &model)?;
        artifacts.checkpoint = Some(CHECKPOINT.into());
        let s = summarize(&config, &report);
        write_json(&put(SUMMARY), &s)?;
        artifacts.summary = Some(SUMMARY.into());
        if let Some(eval) = &s.final_eval {
            write_csv(&put(PER_CLASS), per_class_rows(eval))?;
            artifacts.per_class = Some(PER_CLASS.into());
        }
        summary = Some(s);
    }
    files.push(MANIFEST.into());

    let manifest = RunManifest {
        schema_version: config.schema_version,
        method: config.method,
        seed: config.seed,
        config: config.clone(),
        artifacts,
        files,
        status: if failure.is_some() { "failed" } else { "ok" }.into(),
        error: failure.as_ref().map(|e| e.to_string()),
        timings: Timings {
            load_secs,
            train_secs,
            write_secs: t_write.elapsed().as_secs_f64(),
            total_secs: started.elapsed().as_secs_f64(),
        },
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(Outcome { manifest, summary }),
    }
}

fn summarize(config: &RunConfig, report: &MetricsReport) -> Summary {
    Summary {
        method: report.method,
        seed: config.seed,
        steps: report.steps,
        final_eval: report.final_eval.clone(),
        wa: report.wa.clone(),
    }
}

/// Entry point for `train --config` and `train --manifest`.
pub fn cmd_train(
    config: Option<PathBuf>,
    manifest: Option<PathBuf>,
    method: Option<Method>,
    overrides: &[String],
    out: &Path,
) -> Result<Outcome, CliError> {
    let mut sets = overrides.to_vec();
    if let Some(m) = method {
        sets.push(format!("method={m}"));
    }
    let config = match (config, manifest) {
        (Some(path), None) => RunConfig::load(&path, &sets)?,
        (None, Some(path)) => {
            let m = RunManifest::load(&path)?;
            RunConfig::from_toml(&m.config.to_toml(), &sets)?
        }
        _ => {
            return Err(CliError::Usage(
                "train needs exactly one of --config or --manifest".into(),
            ))
        }
    };
    train(config, out)
}
