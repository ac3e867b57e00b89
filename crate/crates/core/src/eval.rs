//! Clean and robust accuracy, per-class tallies and gradient alignment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{pgd, AttackError, AttackSpec};
use crate::autodiff::Array;
use crate::data::Dataset;
use crate::models::{ModelError, Network};

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 250;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("cannot evaluate on an empty dataset")]
    EmptyDataset,
    #[error("need at least {needed} batches per task, got {found}")]
    TooFewBatches { needed: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustResult {
    pub attack: String,
    pub spec: AttackSpec,
    pub seed: u64,
    pub accuracy: f64,
    pub per_class_correct: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub clean_acc: f64,
    pub class_counts: Vec<usize>,
    pub per_class_correct: Vec<usize>,
    pub robust: Option<RobustResult>,
}

impl EvalReport {
    pub fn robust_acc(&self) -> Option<f64> {
        self.robust.as_ref().map(|r| r.accuracy)
    }
}

fn tally(net: &mut Network, params: &[f64], x: &Array, y: &[usize], per_class: &mut [usize]) -> Result<(), EvalError> {
    for (pred, &label) in net.predict_classes(params, x)?.into_iter().zip(y) {
        if pred == label {
            per_class[label] += 1;
        }
    }
    Ok(())
}

fn clean_counts(net: &mut Network, params: &[f64], data: &Dataset) -> Result<Vec<usize>, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut per_class = vec![0; data.classes()];
    for (x, y) in data.chunks(EVAL_BATCH) {
        tally(net, params, &x, &y, &mut per_class)?;
    }
    Ok(per_class)
}

/// Batches are attacked in dataset order from a single generator seeded with
/// `seed`, so the result is reproducible.
fn robust_counts(
    net: &mut Network,
    params: &[f64],
    data: &Dataset,
    spec: &AttackSpec,
    seed: u64,
) -> Result<Vec<usize>, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class = vec![0; data.classes()];
    for (x, y) in data.chunks(EVAL_BATCH) {
        let adv = pgd(net, params, &x, &y, spec, &mut rng)?;
        tally(net, params, &adv, &y, &mut per_class)?;
    }
    Ok(per_class)
}

fn fraction(correct: &[usize], n: usize) -> f64 {
    correct.iter().sum::<usize>() as f64 / n as f64
}

/// Fraction of samples whose argmax logit (lowest index on ties) equals the label.
pub fn clean_accuracy(net: &mut Network, params: &[f64], data: &Dataset) -> Result<f64, EvalError> {
    Ok(fraction(&clean_counts(net, params, data)?, data.len()))
}

/// Accuracy on PGD examples crafted against `params` itself.
pub fn robust_accuracy(
    net: &mut Network,
    params: &[f64],
    data: &Dataset,
    spec: &AttackSpec,
    seed: u64,
) -> Result<f64, EvalError> {
    Ok(fraction(&robust_counts(net, params, data, spec, seed)?, data.len()))
}

pub fn per_class_report(
    net: &mut Network,
    params: &[f64],
    data: &Dataset,
    attack: Option<(&AttackSpec, u64)>,
) -> Result<EvalReport, EvalError> {
    let per_class_correct = clean_counts(net, params, data)?;
    let robust = match attack {
        Some((spec, seed)) => {
            let counts = robust_counts(net, params, data, spec, seed)?;
            Some(RobustResult {
                attack: spec.name(),
                spec: spec.clone(),
                seed,
                accuracy: fraction(&counts, data.len()),
                per_class_correct: counts,
            })
        }
        None => None,
    };
    Ok(EvalReport {
        n_samples: data.len(),
        clean_acc: fraction(&per_class_correct, data.len()),
        class_counts: data.class_counts(),
        per_class_correct,
        robust,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub pairs: usize,
    pub mean_cosine: f64,
    pub mean_inner: f64,
    /// Set when some gradient had zero norm; its cosines count as 0.
    pub zero_norm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub natural: PairStats,
    pub adversarial: PairStats,
    pub cross: PairStats,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn stats<'a>(pairs: impl Iterator<Item = (&'a [f64], &'a [f64])>) -> PairStats {
    let (mut n, mut cos, mut inner, mut zero) = (0usize, 0.0, 0.0, false);
    for (a, b) in pairs {
        let ip = dot(a, b);
        let norm = dot(a, a).sqrt() * dot(b, b).sqrt();
        n += 1;
        inner += ip;
        if norm > 0.0 {
            cos += (ip / norm).clamp(-1.0, 1.0);
        } else {
            zero = true;
        }
    }
    let k = n.max(1) as f64;
    PairStats {
        pairs: n,
        mean_cosine: cos / k,
        mean_inner: inner / k,
        zero_norm: zero,
    }
}

/// Cosine similarity and inner product between parameter gradients of
/// different mini-batches: natural vs natural, adversarial vs adversarial
/// and natural vs adversarial. The adversarial batches are used as given.
pub fn gradient_alignment(
    net: &mut Network,
    params: &[f64],
    natural: &[(Array, Vec<usize>)],
    adversarial: &[(Array, Vec<usize>)],
) -> Result<AlignmentStats, EvalError> {
    let found = natural.len().min(adversarial.len());
    if found < 2 {
        return Err(EvalError::TooFewBatches { needed: 2, found });
    }
    let mut grads = |batches: &[(Array, Vec<usize>)]| -> Result<Vec<Vec<f64>>, EvalError> {
        batches
            .iter()
            .map(|(x, y)| Ok(net.loss_and_param_grad(params, x, y)?.1.into_inner()))
            .collect()
    };
    let gn = grads(natural)?;
    let ga = grads(adversarial)?;
    let within = |g: &'_ [Vec<f64>]| {
        let mut v = Vec::new();
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                v.push((i, j));
            }
        }
        v
    };
    Ok(AlignmentStats {
        natural: stats(
            within(&gn)
                .into_iter()
                .map(|(i, j)| (gn[i].as_slice(), gn[j].as_slice())),
        ),
        adversarial: stats(
            within(&ga)
                .into_iter()
                .map(|(i, j)| (ga[i].as_slice(), ga[j].as_slice())),
        ),
        cross: stats(
            gn.iter()
                .flat_map(|a| ga.iter().map(move |b| (a.as_slice(), b.as_slice()))),
        ),
    })
}
