//! `sweep`: the cartesian product of override axes, one run per cell.

use std::path::{Path, PathBuf};

use generalist_core::config::RunConfig;
use generalist_core::Method;
use serde::{Deserialize, Serialize};

use crate::error::{exit, CliError};
use crate::train::{create_dir, train, write_json, MANIFEST};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_MANIFEST: &str = "sweep.json";

/// `key=v1;v2;...`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

impl Axis {
    pub fn parse(spec: &str) -> Result<Self, CliError> {
        let bad = || CliError::Usage(format!("bad axis `{spec}`: expected key=v1;v2;..."));
        let (key, values) = spec.split_once('=').ok_or_else(bad)?;
        let key = key.trim();
        let values: Vec<String> = values
            .split(';')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(String::from)
            .collect();
        if key.is_empty() || values.is_empty() {
            return Err(bad());
        }
        Ok(Self {
            key: key.into(),
            values,
        })
    }
}

/// Cells in row-major order: the last axis varies fastest.
pub fn cells(axes: &[Axis]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = vec![vec![]];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut cell = prefix.clone();
                    cell.push(format!("{}={v}", axis.key));
                    cell
                })
            })
            .collect();
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellRecord {
    pub dir: String,
    pub overrides: Vec<String>,
    pub manifest: String,
    pub status: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepManifest {
    pub config: PathBuf,
    pub base_overrides: Vec<String>,
    pub axes: Vec<Axis>,
    pub cells: Vec<CellRecord>,
    pub files: Vec<String>,
}

/// Runs every cell in order. Setup errors (config, data) abort the sweep;
/// a numeric failure in one cell is recorded and the rest still run.
pub fn cmd_sweep(
    config: &Path,
    method: Option<Method>,
    overrides: &[String],
    axes: &[String],
    out: &Path,
) -> Result<SweepManifest, CliError> {
    if axes.is_empty() {
        return Err(CliError::Usage("sweep needs at least one --axis".into()));
    }
    let axes = axes.iter().map(|a| Axis::parse(a)).collect::<Result<Vec<_>, _>>()?;
    let mut base = overrides.to_vec();
    if let Some(m) = method {
        base.push(format!("method={m}"));
    }
    // Parse every cell before running any, so a typo fails fast.
    let grid = cells(&axes);
    let configs = grid
        .iter()
        .map(|cell| RunConfig::load(config, &[base.clone(), cell.clone()].concat()))
        .collect::<Result<Vec<_>, _>>()?;

    create_dir(out)?;
    let mut header = vec!["cell".to_string()];
    header.extend(axes.iter().map(|a| a.key.clone()));
    header.extend(["method", "seed", "status", "clean_acc", "robust_acc", "dir"].map(String::from));
    let csv_path = out.join(SWEEP_CSV);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::output(&csv_path, e))?;
    w.write_record(&header).map_err(|e| CliError::output(&csv_path, e))?;

    let mut records = Vec::new();
    let mut first_failure = None;
    let width = grid.len().saturating_sub(1).to_string().len().max(3);
    for (i, (cell, cfg)) in grid.iter().zip(configs).enumerate() {
        let dir = format!("cell-{i:0width$}");
        let (method, seed) = (cfg.method, cfg.seed);
        let outcome = train(cfg, &out.join(&dir));
        let (status, clean, robust) = match &outcome {
            Ok(o) => {
                let eval = o.summary.as_ref().and_then(|s| s.final_eval.as_ref());
                let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
                (
                    "ok",
                    fmt(eval.map(|e| e.clean_acc)),
                    fmt(eval.and_then(|e| e.robust_acc())),
                )
            }
            Err(e) if e.exit_code() == exit::NUMERIC => {
                first_failure.get_or_insert(exit::NUMERIC);
                ("failed", String::new(), String::new())
            }
            Err(_) => return Err(outcome.err().expect("matched Err")),
        };
        let mut row = vec![i.to_string()];
        row.extend(
            cell.iter()
                .map(|kv| kv.split_once('=').expect("axis cell").1.to_string()),
        );
        row.extend([
            method.to_string(),
            seed.to_string(),
            status.into(),
            clean,
            robust,
            dir.clone(),
        ]);
        w.write_record(&row).map_err(|e| CliError::output(&csv_path, e))?;
        records.push(CellRecord {
            manifest: format!("{dir}/{MANIFEST}"),
            dir,
            overrides: cell.clone(),
            status: status.into(),
        });
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;

    let manifest = SweepManifest {
        config: config.to_path_buf(),
        base_overrides: base,
        axes,
        files: vec![SWEEP_CSV.into(), SWEEP_MANIFEST.into()],
        cells: records,
    };
    write_json(&out.join(SWEEP_MANIFEST), &manifest)?;
    match first_failure {
        Some(code) => Err(CliError::Sweep {
            failed: manifest.cells.iter().filter(|c| c.status != "ok").count(),
            total: manifest.cells.len(),
            code,
        }),
        None => Ok(manifest),
    }
}
