//! L∞ projected gradient attacks.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Array;
use crate::models::{ModelError, Network};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("invalid attack spec: {0}")]
    InvalidSpec(String),
    #[error("candidate shape {candidate:?} differs from anchor shape {anchor:?}")]
    ShapeMismatch { candidate: Vec<usize>, anchor: Vec<usize> },
    #[error("non-finite input gradient at attack step {step}")]
    NonFiniteGradient { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn default_clamp() -> [f64; 2] {
    [0.0, 1.0]
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    /// L∞ radius.
    pub eps: f64,
    /// Sign-step size κ.
    pub step_size: f64,
    pub steps: usize,
    #[serde(default = "default_true")]
    pub random_start: bool,
    /// Value bounds applied after the ball projection.
    #[serde(default = "default_clamp")]
    pub clamp: [f64; 2],
}

impl AttackSpec {
    pub fn pgd(eps: f64, step_size: f64, steps: usize) -> Self {
        Self {
            eps,
            step_size,
            steps,
            random_start: true,
            clamp: default_clamp(),
        }
    }

    /// Evaluation default: 20 steps of size ε/4 with a random start.
    pub fn pgd20(eps: f64) -> Self {
        Self::pgd(eps, eps / 4.0, 20)
    }

    pub fn fgsm(eps: f64) -> Self {
        Self {
            eps,
            step_size: eps,
            steps: 1,
            random_start: false,
            clamp: default_clamp(),
        }
    }

    pub fn without_random_start(mut self) -> Self {
        self.random_start = false;
        self
    }

    /// Short label such as `PGD20`.
    pub fn name(&self) -> String {
        format!("PGD{}", self.steps)
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(AttackError::InvalidSpec(format!(
                "eps must be finite and >= 0, got {}",
                self.eps
            )));
        }
        if self.steps > 0 && self.eps > 0.0 && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(AttackError::InvalidSpec(format!(
                "step_size must be > 0 when steps > 0 and eps > 0, got {}",
                self.step_size
            )));
        }
        let [lo, hi] = self.clamp;
        if !(lo <= hi) {
            return Err(AttackError::InvalidSpec(format!("empty clamp range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Clips `candidate` into `[anchor − ε, anchor + ε]` and then into `clamp`.
pub fn project_linf(candidate: &Array, anchor: &Array, eps: f64, clamp: [f64; 2]) -> Result<Array, AttackError> {
    let mut out = candidate.clone();
    project_in_place(&mut out, anchor, eps, clamp)?;
    Ok(out)
}

fn project_in_place(candidate: &mut Array, anchor: &Array, eps: f64, clamp: [f64; 2]) -> Result<(), AttackError> {
    if candidate.shape() != anchor.shape() {
        return Err(AttackError::ShapeMismatch {
            candidate: candidate.shape().to_vec(),
            anchor: anchor.shape().to_vec(),
        });
    }
    let [lo, hi] = clamp;
    for (c, &a) in candidate.data_mut().iter_mut().zip(anchor.data()) {
        *c = c.max(a - eps).min(a + eps).max(lo).min(hi);
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected gradient ascent on the cross-entropy of `params` at `(x, y)`.
pub fn pgd<R: Rng + ?Sized>(
    net: &mut Network,
    params: &[f64],
    x: &Array,
    y: &[usize],
    spec: &AttackSpec,
    rng: &mut R,
) -> Result<Array, AttackError> {
    spec.validate()?;
    if spec.eps == 0.0 {
        return Ok(x.clone());
    }
    let mut adv = x.clone();
    if spec.random_start {
        let noise = Uniform::new_inclusive(-spec.eps, spec.eps).expect("eps > 0");
        for v in adv.data_mut() {
            *v += noise.sample(rng);
        }
        project_in_place(&mut adv, x, spec.eps, spec.clamp)?;
    }
    for step in 0..spec.steps {
        let (_, grad) = net.loss_and_input_grad(params, &adv, y)?;
        if !grad.all_finite() {
            return Err(AttackError::NonFiniteGradient { step });
        }
        for (a, &g) in adv.data_mut().iter_mut().zip(grad.data()) {
            *a += spec.step_size * sign(g);
        }
        project_in_place(&mut adv, x, spec.eps, spec.clamp)?;
    }
    Ok(adv)
}

/// Single full-radius sign step from the clean point.
pub fn fgsm(net: &mut Network, params: &[f64], x: &Array, y: &[usize], eps: f64) -> Result<Array, AttackError> {
    // No random start, so the generator is never drawn from.
    let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    pgd(net, params, x, y, &AttackSpec::fgsm(eps), &mut unused)
}
