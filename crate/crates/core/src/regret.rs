//! Online convex experiments for the mixed-strategy tradeoff regret and the
//! excess-risk bound of the global learner.
//!
//! Each task draws per-step losses `ℓ(θ) = min(1, Σᵢ (aᵢ (θᵢ − bᵢ))² / s)` on
//! the box `[−B, B]^d`. The scale `s` is chosen so the clip never binds on
//! the box, which keeps every loss convex with values in `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegretError {
    #[error("invalid task family: {0}")]
    InvalidFamily(String),
    #[error("invalid setting: {0}")]
    InvalidSetting(String),
    #[error("trace has {found} losses for task {task}, expected {expected}")]
    TraceMismatch { task: usize, expected: usize, found: usize },
    #[error("non-finite loss at step {step} of task {task}")]
    NonFiniteLoss { task: usize, step: usize },
    #[error("iterate left the unclipped region at step {step} of task {task}")]
    Clipped { task: usize, step: usize },
}

/// One diagonal quadratic loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadLoss {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub scale: f64,
}

impl QuadLoss {
    /// Value before clipping.
    pub fn raw(&self, theta: &[f64]) -> f64 {
        self.a
            .iter()
            .zip(&self.b)
            .zip(theta)
            .map(|((a, b), t)| (a * (t - b)).powi(2))
            .sum::<f64>()
            / self.scale
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        self.raw(theta).min(1.0)
    }

    /// Gradient of [`QuadLoss::value`]; zero where the clip binds.
    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let clipped = self.raw(theta) >= 1.0;
        self.a
            .iter()
            .zip(&self.b)
            .zip(theta)
            .map(|((a, b), t)| {
                if clipped {
                    0.0
                } else {
                    2.0 * a * a * (t - b) / self.scale
                }
            })
            .collect()
    }
}

/// Distribution of per-step losses for the two tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub dim: usize,
    /// Half-width of the parameter box.
    pub bound: f64,
    /// Mean minimizer of each task.
    pub centers: [Vec<f64>; 2],
    /// Standard deviation of each minimizer coordinate around its center.
    pub spread: f64,
    /// Curvature coefficients are drawn uniformly from this range.
    pub curvature: [f64; 2],
}

impl TaskFamily {
    /// Two tasks whose minimizers sit on opposite sides of the origin.
    pub fn opposed(dim: usize) -> Self {
        let c: Vec<f64> = (0..dim).map(|i| if i % 2 == 0 { 0.4 } else { -0.3 }).collect();
        Self {
            dim,
            bound: 1.0,
            centers: [c.clone(), c.iter().map(|v| -v).collect()],
            spread: 0.3,
            curvature: [0.5, 1.5],
        }
    }

    pub fn validate(&self) -> Result<(), RegretError> {
        let bad = |m: &str| Err(RegretError::InvalidFamily(m.into()));
        if self.dim == 0 || !(self.bound > 0.0) {
            return bad("dimension and bound must be positive");
        }
        if self.centers.iter().any(|c| c.len() != self.dim) {
            return bad("centers must have the family's dimension");
        }
        if !(self.spread >= 0.0) {
            return bad("spread must be >= 0");
        }
        let [lo, hi] = self.curvature;
        if !(lo >= 0.0 && lo <= hi && hi > 0.0) {
            return bad("curvature range must satisfy 0 <= lo <= hi, hi > 0");
        }
        Ok(())
    }

    /// Losses are constants of the task when nothing is random.
    pub fn is_degenerate(&self) -> bool {
        self.spread == 0.0 && self.curvature[0] == self.curvature[1]
    }

    /// Smallest scale keeping every loss at or below 1 on the box.
    pub fn scale(&self) -> f64 {
        let hi = self.curvature[1];
        self.dim as f64 * hi * hi * (2.0 * self.bound).powi(2)
    }

    pub fn sample<R: Rng + ?Sized>(&self, task: usize, rng: &mut R) -> QuadLoss {
        let [lo, hi] = self.curvature;
        let curv = Uniform::new_inclusive(lo, hi).expect("range validated");
        let noise = Normal::new(0.0, self.spread).expect("spread validated");
        let a = (0..self.dim).map(|_| curv.sample(rng)).collect();
        let b = self.centers[task]
            .iter()
            .map(|&c| (c + noise.sample(rng)).clamp(-self.bound, self.bound))
            .collect();
        QuadLoss {
            a,
            b,
            scale: self.scale(),
        }
    }
}

/// Loss sequences of both tasks over a shared horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexTaskPair {
    pub dim: usize,
    pub bound: f64,
    pub losses: [Vec<QuadLoss>; 2],
}

impl ConvexTaskPair {
    pub fn sample<R: Rng + ?Sized>(family: &TaskFamily, horizon: usize, rng: &mut R) -> Result<Self, RegretError> {
        family.validate()?;
        let mut losses: [Vec<QuadLoss>; 2] = [Vec::with_capacity(horizon), Vec::with_capacity(horizon)];
        for _ in 0..horizon {
            for (task, seq) in losses.iter_mut().enumerate() {
                seq.push(family.sample(task, rng));
            }
        }
        Ok(Self {
            dim: family.dim,
            bound: family.bound,
            losses,
        })
    }

    pub fn horizon(&self) -> usize {
        self.losses[0].len()
    }
}

/// Sum of diagonal quadratics in closed form: `Σᵢ (Aᵢθᵢ² − 2Bᵢθᵢ + Cᵢ) / s`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadSum {
    a2: Vec<f64>,
    a2b: Vec<f64>,
    a2b2: Vec<f64>,
    scale: f64,
    count: usize,
}

impl QuadSum {
    pub fn new<'a>(dim: usize, losses: impl IntoIterator<Item = &'a QuadLoss>) -> Self {
        let mut s = Self {
            a2: vec![0.0; dim],
            a2b: vec![0.0; dim],
            a2b2: vec![0.0; dim],
            scale: 1.0,
            count: 0,
        };
        for l in losses {
            s.scale = l.scale;
            s.count += 1;
            for i in 0..dim {
                let w = l.a[i] * l.a[i];
                s.a2[i] += w;
                s.a2b[i] += w * l.b[i];
                s.a2b2[i] += w * l.b[i] * l.b[i];
            }
        }
        s
    }

    /// Sum of the (unclipped) losses at `theta`.
    pub fn total(&self, theta: &[f64]) -> f64 {
        (0..theta.len())
            .map(|i| self.a2[i] * theta[i] * theta[i] - 2.0 * self.a2b[i] * theta[i] + self.a2b2[i])
            .sum::<f64>()
            / self.scale
    }

    pub fn mean(&self, theta: &[f64]) -> f64 {
        self.total(theta) / self.count.max(1) as f64
    }

    /// Exact minimizer over `[−bound, bound]^d`; coordinates separate, so
    /// clamping each unconstrained minimizer is optimal.
    pub fn argmin(&self, bound: f64) -> Vec<f64> {
        self.a2
            .iter()
            .zip(&self.a2b)
            .map(|(&w, &wb)| if w > 0.0 { (wb / w).clamp(-bound, bound) } else { 0.0 })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OgdConfig {
    /// Step size at t = 0; step t uses `lr / √(t + 1)`.
    pub lr: f64,
    /// EMA decay of the global iterate.
    pub alpha: f64,
    /// Weight of the second task's iterate in the mix.
    pub gamma: f64,
    /// Shared starting point; drawn uniformly from the box when absent.
    pub start: Option<Vec<f64>>,
}

impl Default for OgdConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            alpha: 0.999,
            gamma: 0.5,
            start: None,
        }
    }
}

/// Played iterates and losses of both learners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    /// `losses[a][t] = ℓ_a^t(θ_a^t)`.
    pub losses: [Vec<f64>; 2],
    /// `inf_θ Σ_t ℓ_a^t(θ)` for each task.
    pub optimum: [f64; 2],
    pub minimizers: [Vec<f64>; 2],
    /// Played iterates, one per step.
    pub iterates: [Vec<Vec<f64>>; 2],
    /// Iterates after the last update (not played).
    pub last: [Vec<f64>; 2],
    /// `γ θ_2^t + (1 − γ) θ_1^t` for every played step.
    pub mixed: Vec<Vec<f64>>,
    /// EMA of the mixed iterates, seeded with the first one.
    pub global_ema: Vec<f64>,
    /// Uniform mean of the mixed iterates.
    pub global_mean: Vec<f64>,
    pub alpha: f64,
}

/// Half the summed excess cumulative loss of the two learners over their
/// best fixed parameters.
pub fn tradeoff_regret(trace: &RegretTrace) -> Result<f64, RegretError> {
    let expected = trace.iterates[0].len();
    for (task, l) in trace.losses.iter().enumerate() {
        if l.len() != expected {
            return Err(RegretError::TraceMismatch {
                task,
                expected,
                found: l.len(),
            });
        }
    }
    Ok(0.5
        * trace
            .losses
            .iter()
            .zip(trace.optimum)
            .map(|(l, opt)| l.iter().sum::<f64>() - opt)
            .sum::<f64>())
}

fn project(theta: &mut [f64], bound: f64) {
    for v in theta {
        *v = v.clamp(-bound, bound);
    }
}

fn mix(n: &[f64], r: &[f64], gamma: f64) -> Vec<f64> {
    n.iter().zip(r).map(|(a, b)| gamma * b + (1.0 - gamma) * a).collect()
}

/// Projected online gradient descent for each task on its own sequence.
pub fn run_ogd_pair(pair: &ConvexTaskPair, config: &OgdConfig, seed: u64) -> Result<RegretTrace, RegretError> {
    if !(config.lr > 0.0) {
        return Err(RegretError::InvalidSetting(format!(
            "lr must be > 0, got {}",
            config.lr
        )));
    }
    if !(0.0..1.0).contains(&config.alpha) || !(0.0..=1.0).contains(&config.gamma) {
        return Err(RegretError::InvalidSetting(
            "alpha must lie in [0, 1) and gamma in [0, 1]".into(),
        ));
    }
    let horizon = pair.horizon();
    if horizon == 0 || pair.losses[1].len() != horizon {
        return Err(RegretError::InvalidSetting(
            "both tasks need the same positive horizon".into(),
        ));
    }
    let start = match &config.start {
        Some(s) if s.len() == pair.dim => s.clone(),
        Some(_) => return Err(RegretError::InvalidSetting("start has the wrong dimension".into())),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = Uniform::new_inclusive(-pair.bound, pair.bound).expect("bound > 0");
            (0..pair.dim).map(|_| u.sample(&mut rng)).collect()
        }
    };
    let mut theta = [start.clone(), start];
    let mut losses = [Vec::with_capacity(horizon), Vec::with_capacity(horizon)];
    let mut iterates = [Vec::with_capacity(horizon), Vec::with_capacity(horizon)];
    let mut mixed = Vec::with_capacity(horizon);
    let mut ema: Vec<f64> = Vec::new();
    let mut sum = vec![0.0; pair.dim];
    for t in 0..horizon {
        let eta = config.lr / ((t + 1) as f64).sqrt();
        for task in 0..2 {
            let loss = &pair.losses[task][t];
            let value = loss.value(&theta[task]);
            if !value.is_finite() {
                return Err(RegretError::NonFiniteLoss { task, step: t });
            }
            if loss.raw(&theta[task]) > 1.0 {
                return Err(RegretError::Clipped { task, step: t });
            }
            losses[task].push(value);
            iterates[task].push(theta[task].clone());
            let g = loss.grad(&theta[task]);
            for (v, gi) in theta[task].iter_mut().zip(g) {
                *v -= eta * gi;
            }
            project(&mut theta[task], pair.bound);
        }
        let m = mix(&iterates[0][t], &iterates[1][t], config.gamma);
        for (s, v) in sum.iter_mut().zip(&m) {
            *s += v;
        }
        ema = if t == 0 {
            m.clone()
        } else {
            ema.iter()
                .zip(&m)
                .map(|(g, v)| config.alpha * g + (1.0 - config.alpha) * v)
                .collect()
        };
        mixed.push(m);
    }
    let sums = [
        QuadSum::new(pair.dim, &pair.losses[0]),
        QuadSum::new(pair.dim, &pair.losses[1]),
    ];
    let minimizers = [sums[0].argmin(pair.bound), sums[1].argmin(pair.bound)];
    let optimum = [0, 1].map(|a| pair.losses[a].iter().map(|l| l.value(&minimizers[a])).sum());
    Ok(RegretTrace {
        losses,
        optimum,
        minimizers,
        iterates,
        last: theta,
        mixed,
        global_ema: ema,
        global_mean: sum.iter().map(|s| s / horizon as f64).collect(),
        alpha: config.alpha,
    })
}

/// Right-hand side of the excess-risk bound.
pub fn risk_bound(optimum_loss: f64, regret: f64, horizon: usize, delta: f64) -> f64 {
    let t = horizon as f64;
    optimum_loss + regret / t + 2.0 * ((2.0 / t) * (1.0 / delta).ln()).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub trials: usize,
    pub horizon: usize,
    pub delta: f64,
    /// Held-out losses per task used to estimate expectations.
    pub holdout: usize,
    pub ogd: OgdConfig,
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            trials: 200,
            horizon: 1000,
            delta: 0.05,
            holdout: 2000,
            ogd: OgdConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub regret: f64,
    /// Expected held-out loss of the uniform-mean global iterate.
    pub lhs: f64,
    pub rhs: f64,
    pub violated: bool,
    /// Same with the EMA global iterate.
    pub lhs_ema: f64,
    pub violated_ema: bool,
    /// Loss of the averaged iterate is at most the average loss, for both
    /// the uniform and the EMA weights.
    pub jensen_holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub delta: f64,
    pub horizon: usize,
    pub trials: Vec<TrialResult>,
    pub violation_fraction: f64,
    pub ema_violation_fraction: f64,
    pub jensen_holds: bool,
    /// The family has no randomness; the bound is then vacuous.
    pub degenerate: bool,
}

/// Tolerance for the Jensen comparison, relative to the loss scale of 1.
const JENSEN_TOL: f64 = 1e-12;

/// Runs independent trials. In each, both learners play `horizon` fresh
/// losses; the global iterate is scored on held-out draws from the equal
/// mixture of the two tasks, against the best fixed point for those draws.
pub fn verify_risk_bound(family: &TaskFamily, config: &BoundConfig) -> Result<BoundReport, RegretError> {
    family.validate()?;
    if config.trials == 0 || config.horizon == 0 || config.holdout == 0 {
        return Err(RegretError::InvalidSetting(
            "trials, horizon and holdout must be positive".into(),
        ));
    }
    if !(config.delta > 0.0 && config.delta <= 1.0) {
        return Err(RegretError::InvalidSetting(format!(
            "delta must lie in (0, 1], got {}",
            config.delta
        )));
    }
    let mut trials = Vec::with_capacity(config.trials);
    for trial in 0..config.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("trial/{trial}")));
        let pair = ConvexTaskPair::sample(family, config.horizon, &mut rng)?;
        let trace = run_ogd_pair(&pair, &config.ogd, rng.random())?;
        let regret = tradeoff_regret(&trace)?;

        let held: Vec<QuadLoss> = (0..config.holdout)
            .flat_map(|_| [family.sample(0, &mut rng), family.sample(1, &mut rng)])
            .collect();
        let test = QuadSum::new(family.dim, &held);
        let best = test.argmin(family.bound);
        let lhs = test.mean(&trace.global_mean);
        let lhs_ema = test.mean(&trace.global_ema);
        let rhs = risk_bound(test.mean(&best), regret, config.horizon, config.delta);

        let per_step: Vec<f64> = trace.mixed.iter().map(|m| test.mean(m)).collect();
        let uniform = per_step.iter().sum::<f64>() / per_step.len() as f64;
        let n = per_step.len();
        let alpha = trace.alpha;
        let weighted: f64 = per_step
            .iter()
            .enumerate()
            .map(|(t, v)| {
                let w = if t == 0 {
                    alpha.powi(n as i32 - 1)
                } else {
                    (1.0 - alpha) * alpha.powi((n - 1 - t) as i32)
                };
                w * v
            })
            .sum();
        let jensen_holds = lhs <= uniform + JENSEN_TOL && lhs_ema <= weighted + JENSEN_TOL;

        trials.push(TrialResult {
            trial,
            regret,
            lhs,
            rhs,
            violated: lhs > rhs,
            lhs_ema,
            violated_ema: lhs_ema > rhs,
            jensen_holds,
        });
    }
    let frac = |f: fn(&TrialResult) -> bool| trials.iter().filter(|t| f(t)).count() as f64 / trials.len() as f64;
    Ok(BoundReport {
        delta: config.delta,
        horizon: config.horizon,
        violation_fraction: frac(|t| t.violated),
        ema_violation_fraction: frac(|t| t.violated_ema),
        jensen_holds: trials.iter().all(|t| t.jensen_holds),
        degenerate: family.is_degenerate(),
        trials,
    })
}
