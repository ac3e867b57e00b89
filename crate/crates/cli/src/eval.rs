//! `eval`: score a checkpoint on clean and attacked inputs.

use std::path::{Path, PathBuf};

use generalist_core::config::RunConfig;
use generalist_core::eval::EvalReport;
use generalist_core::{checkpoint, load_idx, per_class_report, AttackSpec, Dataset, ModelSpec, Network};

use crate::error::CliError;
use crate::train::{eval_split, write_json};

/// Command-line overrides of the evaluation attack.
#[derive(Clone, Debug, Default)]
pub struct AttackFlags {
    pub eps: Option<f64>,
    pub steps: Option<usize>,
    pub step_size: Option<f64>,
    pub seed: Option<u64>,
    pub limit: Option<usize>,
}

#[derive(Clone, Debug)]
pub enum EvalData {
    Config { path: PathBuf, overrides: Vec<String> },
    Idx { images: PathBuf, labels: PathBuf },
}

fn check_data(spec: &ModelSpec, data: &Dataset) -> Result<(), CliError> {
    if data.sample_shape() != spec.input_shape.as_slice() {
        return Err(CliError::Mismatch(format!(
            "model expects inputs of shape {:?}, data has {:?}",
            spec.input_shape,
            data.sample_shape()
        )));
    }
    if data.classes() > spec.classes {
        return Err(CliError::Mismatch(format!(
            "model has {} classes, data has {}",
            spec.classes,
            data.classes()
        )));
    }
    Ok(())
}

fn resolve_attack(base: Option<AttackSpec>, flags: &AttackFlags) -> Option<AttackSpec> {
    let eps = flags.eps.or(base.as_ref().map(|a| a.eps))?;
    let mut spec = base.unwrap_or_else(|| AttackSpec::pgd20(eps));
    if flags.eps.is_some() && flags.step_size.is_none() {
        spec.step_size = eps / 4.0;
    }
    spec.eps = eps;
    if let Some(k) = flags.steps {
        spec.steps = k;
    }
    if let Some(s) = flags.step_size {
        spec.step_size = s;
    }
    Some(spec)
}

/// Evaluates a checkpoint. The attack comes from the config's evaluation
/// section when given, then from the flags; without either only clean
/// accuracy is reported.
pub fn cmd_eval(
    checkpoint_path: &Path,
    data: &EvalData,
    flags: &AttackFlags,
    out: Option<&Path>,
) -> Result<EvalReport, CliError> {
    let model = checkpoint::load(checkpoint_path)?;
    let (test, base, mut seed, mut limit) = match data {
        EvalData::Config { path, overrides } => {
            let mut config = RunConfig::load(path, overrides)?;
            let (train, test) = config.data.load()?;
            config.materialize(&train);
            let expected = config.model_spec()?;
            if expected != model.spec {
                return Err(CliError::Mismatch(format!(
                    "config describes {expected:?}, checkpoint holds {:?}",
                    model.spec
                )));
            }
            let test = eval_split(&config, test);
            (test, Some(config.eval_attack()), config.eval.seed, None)
        }
        EvalData::Idx { images, labels } => {
            let d = load_idx(images, labels)?;
            if d.classes() > model.spec.classes {
                return Err(CliError::Mismatch(format!(
                    "model has {} classes, labels reach {}",
                    model.spec.classes,
                    d.classes()
                )));
            }
            let d = d.with_classes(model.spec.classes)?;
            (d, None, 0, None)
        }
    };
    if let Some(s) = flags.seed {
        seed = s;
    }
    if flags.limit.is_some() {
        limit = flags.limit;
    }
    let test = match limit {
        Some(n) => test.take(n),
        None => test,
    };
    check_data(&model.spec, &test)?;
    let attack = resolve_attack(base, flags);
    if let Some(a) = &attack {
        a.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut net = Network::new(&model.spec).map_err(|e| CliError::Mismatch(e.to_string()))?;
    let report = per_class_report(
        &mut net,
        model.params.as_slice(),
        &test,
        attack.as_ref().map(|a| (a, seed)),
    )?;
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(report)
}
