use generalist_core::regret::{verify_risk_bound, BoundConfig, TaskFamily};

use crate::common::ensure;
use crate::Outcome;

/// Upper end of a one-sided 95% binomial interval around δ = 0.05 with 200
/// trials.
const SLACK: f64 = 0.08;

pub fn criterion() -> Outcome {
    let config = BoundConfig {
        trials: 200,
        horizon: 1000,
        delta: 0.05,
        seed: 1,
        ..BoundConfig::default()
    };
    let report = verify_risk_bound(&TaskFamily::opposed(4), &config).map_err(|e| e.to_string())?;
    ensure(!report.degenerate, || "task family is degenerate".into())?;
    ensure(report.jensen_holds, || {
        let bad = report.trials.iter().filter(|t| !t.jensen_holds).count();
        format!("Jensen check failed on {bad} traces")
    })?;
    let f = report.violation_fraction;
    let detail = format!(
        "{} trials, violation fraction {f:.3} (EMA iterate {:.3}), Jensen holds on every trace",
        report.trials.len(),
        report.ema_violation_fraction
    );
    ensure(f <= SLACK, || detail.clone())?;
    if f > config.delta {
        return Ok(format!("{detail}; above delta but within binomial slack {SLACK}"));
    }
    Ok(detail)
}
