//! `regret`: repeated online-convex trials of the excess-risk bound.

use std::path::Path;

use generalist_core::regret::{verify_risk_bound, BoundConfig, BoundReport, OgdConfig, TaskFamily};
use serde::Serialize;

use crate::error::CliError;
use crate::train::{write_csv, write_json};

#[derive(Clone, Debug)]
pub struct RegretArgs {
    pub trials: usize,
    pub horizon: usize,
    pub delta: f64,
    pub seed: u64,
    pub dim: usize,
    pub holdout: usize,
    pub lr: f64,
}

impl Default for RegretArgs {
    fn default() -> Self {
        let d = BoundConfig::default();
        Self {
            trials: d.trials,
            horizon: d.horizon,
            delta: d.delta,
            seed: d.seed,
            dim: 4,
            holdout: d.holdout,
            lr: d.ogd.lr,
        }
    }
}

#[derive(Serialize)]
struct Row {
    trial: usize,
    #[serde(rename = "R_T")]
    regret: f64,
    #[serde(rename = "LHS")]
    lhs: f64,
    #[serde(rename = "RHS")]
    rhs: f64,
    violated: bool,
}

/// Aggregate numbers printed to stdout and optionally written as JSON.
#[derive(Clone, Debug, Serialize)]
pub struct RegretSummary {
    pub trials: usize,
    pub horizon: usize,
    pub delta: f64,
    pub violations: usize,
    pub violation_fraction: f64,
    pub ema_violation_fraction: f64,
    pub jensen_holds: bool,
    pub degenerate: bool,
}

impl From<&BoundReport> for RegretSummary {
    fn from(r: &BoundReport) -> Self {
        Self {
            trials: r.trials.len(),
            horizon: r.horizon,
            delta: r.delta,
            violations: r.trials.iter().filter(|t| t.violated).count(),
            violation_fraction: r.violation_fraction,
            ema_violation_fraction: r.ema_violation_fraction,
            jensen_holds: r.jensen_holds,
            degenerate: r.degenerate,
        }
    }
}

pub fn cmd_regret(args: &RegretArgs, out: &Path, summary: Option<&Path>) -> Result<RegretSummary, CliError> {
    if !(args.delta > 0.0 && args.delta <= 1.0) {
        return Err(CliError::Usage(format!(
            "--delta must lie in (0, 1], got {}",
            args.delta
        )));
    }
    let config = BoundConfig {
        trials: args.trials,
        horizon: args.horizon,
        delta: args.delta,
        holdout: args.holdout,
        ogd: OgdConfig {
            lr: args.lr,
            ..OgdConfig::default()
        },
        seed: args.seed,
    };
    let report = verify_risk_bound(&TaskFamily::opposed(args.dim), &config)?;
    write_csv(
        out,
        report.trials.iter().map(|t| Row {
            trial: t.trial,
            regret: t.regret,
            lhs: t.lhs,
            rhs: t.rhs,
            violated: t.violated,
        }),
    )?;
    let s = RegretSummary::from(&report);
    if let Some(path) = summary {
        write_json(path, &s)?;
    }
    Ok(s)
}
