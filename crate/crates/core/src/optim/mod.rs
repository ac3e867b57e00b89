//! Task-aware optimizers, learning-rate schedules, per-learner weight
//! averaging and the EMA aggregation of the global learner.

mod schedule;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::ParamVector;
pub use schedule::{Schedule, ScheduleError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("non-finite gradient at parameter index {index}")]
    NonFiniteGradient { index: usize },
    #[error("invalid coefficient {name} = {value}")]
    InvalidCoefficient { name: &'static str, value: f64 },
    #[error("weight average requested before any snapshot")]
    EmptyAverage,
    #[error("invalid optimizer spec: {0}")]
    InvalidSpec(String),
}

fn check_len(expected: usize, found: usize) -> Result<(), OptimError> {
    if expected != found {
        return Err(OptimError::LengthMismatch { expected, found });
    }
    Ok(())
}

fn check_finite(grads: &[f64]) -> Result<(), OptimError> {
    match grads.iter().position(|g| !g.is_finite()) {
        Some(index) => Err(OptimError::NonFiniteGradient { index }),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    5e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    /// Learning rate as a function of the epoch.
    pub lr: Schedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// L2 coefficient added to the gradient (`g + λθ`).
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl OptimizerSpec {
    pub fn sgd(lr: Schedule) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            lr,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }

    pub fn adam(lr: Schedule) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr)
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn lr_at(&self, epoch: f64) -> f64 {
        self.lr.at(epoch)
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr.min_value() > 0.0) {
            return Err(OptimError::InvalidSpec("learning rates must be positive".into()));
        }
        let unit = |name, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(OptimError::InvalidCoefficient { name, value: v })
            }
        };
        unit("momentum", self.momentum)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.eps > 0.0) {
            return Err(OptimError::InvalidCoefficient {
                name: "eps",
                value: self.eps,
            });
        }
        if !(self.weight_decay >= 0.0) {
            return Err(OptimError::InvalidCoefficient {
                name: "weight_decay",
                value: self.weight_decay,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// `v <- momentum * v + (g + wd * θ)`, `θ <- θ - lr * v`.
pub fn sgd_step(
    state: &mut SgdState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), OptimError> {
    check_len(params.len(), grads.len())?;
    check_len(params.len(), state.velocity.len())?;
    check_finite(grads)?;
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        let g = if weight_decay != 0.0 { g + weight_decay * *p } else { g };
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Adam with bias correction; weight decay enters the gradient as `g + wd * θ`.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> Result<(), OptimError> {
    check_len(params.len(), grads.len())?;
    check_len(params.len(), state.m.len())?;
    check_len(params.len(), state.v.len())?;
    check_finite(grads)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = if weight_decay != 0.0 { g + weight_decay * *p } else { g };
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Sgd(SgdState),
    Adam(AdamState),
}

/// One learner's optimizer: spec plus moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    spec: OptimizerSpec,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, len: usize) -> Self {
        let state = Self::fresh_state(&spec, len);
        Self { spec, state }
    }

    fn fresh_state(spec: &OptimizerSpec, len: usize) -> OptimizerState {
        match spec.kind {
            OptimizerKind::SgdMomentum => OptimizerState::Sgd(SgdState {
                velocity: vec![0.0; len],
            }),
            OptimizerKind::Adam => OptimizerState::Adam(AdamState {
                m: vec![0.0; len],
                v: vec![0.0; len],
                step: 0,
            }),
        }
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn lr_at(&self, epoch: f64) -> f64 {
        self.spec.lr_at(epoch)
    }

    /// Zeroes every moment buffer and the step counter.
    pub fn reset(&mut self) {
        let len = match &self.state {
            OptimizerState::Sgd(s) => s.velocity.len(),
            OptimizerState::Adam(s) => s.m.len(),
        };
        self.state = Self::fresh_state(&self.spec, len);
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), OptimError> {
        let s = &self.spec;
        match &mut self.state {
            OptimizerState::Sgd(state) => sgd_step(state, params, grads, lr, s.momentum, s.weight_decay),
            OptimizerState::Adam(state) => adam_step(state, params, grads, lr, s.beta1, s.beta2, s.eps, s.weight_decay),
        }
    }
}

/// `α'·θ_g + (1 − α')·(γ·θ_r + (1 − γ)·θ_n)`, elementwise.
///
/// Each coordinate of the result lies in the closed hull of the three inputs.
/// Degenerate coefficients are exact: `γ = 1` mixes in `θ_r` unchanged,
/// `γ = 0` mixes in `θ_n`, and `α' = 0` returns the mix itself.
pub fn ema_update(
    global: &[f64],
    natural: &[f64],
    robust: &[f64],
    alpha: f64,
    gamma: f64,
) -> Result<ParamVector, OptimError> {
    let mut out = global.to_vec();
    ema_update_in_place(&mut out, natural, robust, alpha, gamma)?;
    Ok(ParamVector::new(out))
}

pub fn ema_update_in_place(
    global: &mut [f64],
    natural: &[f64],
    robust: &[f64],
    alpha: f64,
    gamma: f64,
) -> Result<(), OptimError> {
    check_len(global.len(), natural.len())?;
    check_len(global.len(), robust.len())?;
    if !(0.0..1.0).contains(&alpha) {
        return Err(OptimError::InvalidCoefficient {
            name: "alpha",
            value: alpha,
        });
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(OptimError::InvalidCoefficient {
            name: "gamma",
            value: gamma,
        });
    }
    let between = |v: f64, a: f64, b: f64| v.max(a.min(b)).min(a.max(b));
    for ((g, &n), &r) in global.iter_mut().zip(natural).zip(robust) {
        let mix = if gamma == 1.0 {
            r
        } else if gamma == 0.0 || n == r {
            n
        } else {
            between(gamma * r + (1.0 - gamma) * n, n, r)
        };
        *g = if alpha == 0.0 {
            mix
        } else if *g == mix {
            *g
        } else {
            between(alpha * *g + (1.0 - alpha) * mix, *g, mix)
        };
    }
    Ok(())
}

/// Uniform running mean of parameter snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct WaAccumulator {
    sum: Vec<f64>,
    count: usize,
}

impl WaAccumulator {
    pub fn new(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, params: &[f64]) -> Result<(), OptimError> {
        check_len(self.sum.len(), params.len())?;
        for (s, &p) in self.sum.iter_mut().zip(params) {
            *s += p;
        }
        self.count += 1;
        Ok(())
    }

    pub fn value(&self) -> Result<ParamVector, OptimError> {
        if self.count == 0 {
            return Err(OptimError::EmptyAverage);
        }
        let n = self.count as f64;
        Ok(ParamVector::new(self.sum.iter().map(|s| s / n).collect()))
    }

    pub fn clear(&mut self) {
        self.sum.iter_mut().for_each(|s| *s = 0.0);
        self.count = 0;
    }
}
