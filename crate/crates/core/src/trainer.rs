//! The two-learner training loop: a natural learner and a robust learner
//! train side by side, a global learner tracks an EMA of their mix, and at
//! scheduled epoch boundaries the global parameters are copied back into both.
//! Plain natural training and PGD adversarial training share the machinery.

use std::fmt;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{pgd, AttackError, AttackSpec};
use crate::autodiff::Array;
use crate::data::{BatchStream, Dataset};
use crate::derive_seed;
use crate::eval::{per_class_report, EvalError, EvalReport};
use crate::models::{init_params, ModelError, ModelSpec, Network, ParamVector};
use crate::optim::{ema_update_in_place, OptimError, Optimizer, OptimizerSpec, Schedule, WaAccumulator};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    #[default]
    Serial,
    /// The two learner updates of a step run on separate threads.
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Learner {
    Natural,
    Robust,
    Global,
}

impl fmt::Display for Learner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Learner::Natural => "natural",
            Learner::Robust => "robust",
            Learner::Global => "global",
        })
    }
}

/// Weight averaging of per-epoch snapshots.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaConfig {
    pub natural: bool,
    pub robust: bool,
    pub global: bool,
    /// Snapshots are taken after every epoch past this many.
    pub warmup: usize,
    /// Clear the learners' accumulators when they receive the global parameters.
    pub reset_on_communicate: bool,
}

fn default_alpha() -> f64 {
    0.999
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralistConfig {
    pub model: ModelSpec,
    /// Attack used to build the robust learner's training batches.
    pub attack: AttackSpec,
    pub optim_n: OptimizerSpec,
    pub optim_r: OptimizerSpec,
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to one pass over the natural training set.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    /// First epoch boundary at which communication may happen.
    pub t_prime: usize,
    /// Communication period in epochs.
    pub c: usize,
    /// EMA decay of the global learner.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Weight of the robust learner in the mix, by epoch.
    pub gamma: Schedule,
    /// Before this epoch the global learner equals the mix (no decay).
    #[serde(default)]
    pub ema_start_epoch: usize,
    /// Zero optimizer moments when a learner is overwritten by the global one.
    #[serde(default = "default_true")]
    pub reset_optimizer: bool,
    #[serde(default)]
    pub wa: WaConfig,
    /// Feed both learners the same batch sequence.
    #[serde(default)]
    pub shared_batches: bool,
    pub seed: u64,
    #[serde(default)]
    pub mode: ExecMode,
}

impl GeneralistConfig {
    /// A config with the stated defaults around the given pieces.
    pub fn new(model: ModelSpec, attack: AttackSpec, optim: OptimizerSpec, epochs: usize, batch_size: usize) -> Self {
        Self {
            model,
            attack,
            optim_n: optim.clone(),
            optim_r: optim,
            epochs,
            batch_size,
            steps_per_epoch: None,
            t_prime: 0,
            c: 1,
            alpha: default_alpha(),
            gamma: Schedule::constant(0.5),
            ema_start_epoch: 0,
            reset_optimizer: true,
            wa: WaConfig::default(),
            shared_batches: false,
            seed: 0,
            mode: ExecMode::Serial,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        self.model.validate()?;
        self.attack
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        for spec in [&self.optim_n, &self.optim_r] {
            spec.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        }
        if self.c == 0 {
            return bad("communication period c must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if self.gamma.points().iter().any(|&(_, g)| !(0.0..=1.0).contains(&g)) {
            return bad("gamma values must lie in [0, 1]".into());
        }
        if self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return bad("batch_size and steps_per_epoch must be positive".into());
        }
        Ok(())
    }

    fn steps(&self, n: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| n.div_ceil(self.batch_size))
    }

    fn check_data(&self, data: &Dataset) -> Result<(), TrainError> {
        if data.sample_shape() != self.model.input_shape.as_slice() {
            return Err(TrainError::InvalidConfig(format!(
                "dataset samples have shape {:?}, model expects {:?}",
                data.sample_shape(),
                self.model.input_shape
            )));
        }
        if data.classes() > self.model.classes {
            return Err(TrainError::InvalidConfig(format!(
                "dataset has {} classes, model has {}",
                data.classes(),
                self.model.classes
            )));
        }
        Ok(())
    }
}

/// `true` iff `t ≥ t′` and `t` is a multiple of `c`.
pub fn should_communicate(t: usize, t_prime: usize, c: usize) -> bool {
    t >= t_prime && t % c == 0
}

/// Mixing ratio for the given epoch.
pub fn gamma_at(schedule: &Schedule, epoch: f64) -> f64 {
    schedule.at(epoch)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("step {step}, {learner} learner: non-finite gradient in {block} (index {index})")]
    NonFiniteGradient {
        step: u64,
        learner: Learner,
        block: String,
        index: usize,
    },
    #[error("step {step}, {learner} learner: {source}")]
    Attack {
        step: u64,
        learner: Learner,
        source: AttackError,
    },
    #[error("step {step}, {learner} learner: {source}")]
    Optim {
        step: u64,
        learner: Learner,
        source: OptimError,
    },
    #[error("step {step}, {learner} learner: {source}")]
    Step {
        step: u64,
        learner: Learner,
        source: ModelError,
    },
    #[error("global update at step {step}: {source}")]
    Global { step: u64, source: OptimError },
    #[error("global parameters became non-finite at step {step}")]
    NonFiniteGlobal { step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
}

impl TrainError {
    /// Whether the failure is numeric (divergence) rather than a setup problem.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteGradient { .. }
                | TrainError::NonFiniteGlobal { .. }
                | TrainError::Attack {
                    source: AttackError::NonFiniteGradient { .. },
                    ..
                }
        )
    }
}

/// One base learner: parameters, optimizer, optional weight average and a
/// private compiled network.
#[derive(Clone, Debug)]
pub struct LearnerState {
    pub params: ParamVector,
    pub optimizer: Optimizer,
    pub wa: Option<WaAccumulator>,
    net: Network,
}

impl LearnerState {
    pub fn new(spec: &ModelSpec, params: ParamVector, optim: OptimizerSpec, wa: bool) -> Result<Self, TrainError> {
        let net = Network::new(spec)?;
        net.layout().check_len(params.len())?;
        let n = params.len();
        Ok(Self {
            params,
            optimizer: Optimizer::new(optim, n),
            wa: wa.then(|| WaAccumulator::new(n)),
            net,
        })
    }

    /// One optimizer step on the cross-entropy of `(x, y)`, or of its PGD
    /// counterpart against the current parameters when `attack` is given.
    fn step(
        &mut self,
        who: Learner,
        step: u64,
        x: &Array,
        y: &[usize],
        lr: f64,
        attack: Option<(&AttackSpec, &mut ChaCha8Rng)>,
    ) -> Result<f64, TrainError> {
        let adv;
        let input = match attack {
            Some((spec, rng)) => {
                adv = pgd(&mut self.net, &self.params, x, y, spec, rng).map_err(|source| TrainError::Attack {
                    step,
                    learner: who,
                    source,
                })?;
                &adv
            }
            None => x,
        };
        let (loss, grads) =
            self.net
                .loss_and_param_grad(&self.params, input, y)
                .map_err(|source| TrainError::Step {
                    step,
                    learner: who,
                    source,
                })?;
        self.optimizer.step(&mut self.params, &grads, lr).map_err(|e| match e {
            OptimError::NonFiniteGradient { index } => TrainError::NonFiniteGradient {
                step,
                learner: who,
                block: self
                    .net
                    .layout()
                    .block_of(index)
                    .map_or_else(|| "?".into(), |b| b.name.clone()),
                index,
            },
            source => TrainError::Optim {
                step,
                learner: who,
                source,
            },
        })?;
        Ok(loss)
    }

    fn receive(&mut self, params: &ParamVector, reset_optimizer: bool, reset_wa: bool) {
        self.params.clone_from(params);
        if reset_optimizer {
            self.optimizer.reset();
        }
        if reset_wa {
            if let Some(wa) = &mut self.wa {
                wa.clear();
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneralistState {
    pub natural: LearnerState,
    pub robust: LearnerState,
    pub global: ParamVector,
    pub wa_global: Option<WaAccumulator>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed training steps.
    pub step: u64,
    attack_rng: ChaCha8Rng,
}

impl GeneralistState {
    /// All three learners start from the same initialization.
    pub fn new(config: &GeneralistConfig) -> Result<Self, TrainError> {
        let init = init_params(&config.model, derive_seed(config.seed, "init"))?;
        Self::from_params(config, init)
    }

    pub fn from_params(config: &GeneralistConfig, init: ParamVector) -> Result<Self, TrainError> {
        let wa = &config.wa;
        Ok(Self {
            natural: LearnerState::new(&config.model, init.clone(), config.optim_n.clone(), wa.natural)?,
            robust: LearnerState::new(&config.model, init.clone(), config.optim_r.clone(), wa.robust)?,
            wa_global: wa.global.then(|| WaAccumulator::new(init.len())),
            global: init,
            epoch: 0,
            step: 0,
            attack_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "attack")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub natural: f64,
    pub robust: f64,
}

/// One iteration: the natural learner steps on its clean batch, the robust
/// learner steps on PGD examples of its batch, then the global learner takes
/// an EMA step toward `γ θ_r + (1 − γ) θ_n`.
pub fn train_step(
    state: &mut GeneralistState,
    config: &GeneralistConfig,
    batch_n: (&Array, &[usize]),
    batch_r: (&Array, &[usize]),
) -> Result<StepLosses, TrainError> {
    let epoch = state.epoch as f64;
    let (lr_n, lr_r) = (config.optim_n.lr_at(epoch), config.optim_r.lr_at(epoch));
    let gamma = gamma_at(&config.gamma, epoch);
    let step = state.step;
    let GeneralistState {
        natural,
        robust,
        attack_rng,
        ..
    } = state;
    let attack = Some((&config.attack, attack_rng));
    let (ln, lr) = match config.mode {
        ExecMode::Serial => {
            let ln = natural.step(Learner::Natural, step, batch_n.0, batch_n.1, lr_n, None);
            let lr = robust.step(Learner::Robust, step, batch_r.0, batch_r.1, lr_r, attack);
            (ln, lr)
        }
        ExecMode::Parallel => thread::scope(|s| {
            let handle = s.spawn(|| natural.step(Learner::Natural, step, batch_n.0, batch_n.1, lr_n, None));
            let lr = robust.step(Learner::Robust, step, batch_r.0, batch_r.1, lr_r, attack);
            (handle.join().expect("natural learner thread panicked"), lr)
        }),
    };
    let (ln, lr) = (ln?, lr?);
    let alpha = if state.epoch < config.ema_start_epoch {
        0.0
    } else {
        config.alpha
    };
    ema_update_in_place(
        &mut state.global,
        &state.natural.params,
        &state.robust.params,
        alpha,
        gamma,
    )
    .map_err(|source| TrainError::Global { step, source })?;
    if !state.global.is_finite() {
        return Err(TrainError::NonFiniteGlobal { step });
    }
    state.step += 1;
    Ok(StepLosses {
        natural: ln,
        robust: lr,
    })
}

/// Closes the current epoch: takes weight-average snapshots, then, if
/// [`should_communicate`] fires for the number of completed epochs, copies
/// the global parameters into both learners. Returns whether it did.
pub fn end_of_epoch(state: &mut GeneralistState, config: &GeneralistConfig) -> bool {
    state.epoch += 1;
    let done = state.epoch;
    if done > config.wa.warmup {
        for (wa, params) in [
            (&mut state.natural.wa, &state.natural.params),
            (&mut state.robust.wa, &state.robust.params),
            (&mut state.wa_global, &state.global),
        ] {
            if let Some(acc) = wa {
                acc.push(params).expect("lengths agree");
            }
        }
    }
    let communicate = should_communicate(done, config.t_prime, config.c);
    if communicate {
        let reset_wa = config.wa.reset_on_communicate;
        state.natural.receive(&state.global, config.reset_optimizer, reset_wa);
        state.robust.receive(&state.global, config.reset_optimizer, reset_wa);
    }
    communicate
}

/// Held-out data and attack used to score the returned parameters.
#[derive(Clone, Debug)]
pub struct Monitor<'a> {
    pub data: &'a Dataset,
    pub attack: AttackSpec,
    pub seed: u64,
    /// Evaluate after every `every`-th epoch; the last epoch is always evaluated.
    pub every: usize,
}

impl Monitor<'_> {
    fn due(&self, done: usize, epochs: usize) -> bool {
        done == epochs || (self.every > 0 && done % self.every == 0)
    }

    fn report(&self, spec: &ModelSpec, params: &[f64]) -> Result<EvalReport, TrainError> {
        let mut net = Network::new(spec)?;
        Ok(per_class_report(
            &mut net,
            params,
            self.data,
            Some((&self.attack, self.seed)),
        )?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Generalist,
    /// Natural training.
    Nt,
    /// PGD adversarial training.
    At,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Generalist => "generalist",
            Method::Nt => "nt",
            Method::At => "at",
        })
    }
}

/// One row per completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub gamma: Option<f64>,
    pub lr_n: Option<f64>,
    pub lr_r: Option<f64>,
    pub clean_acc: Option<f64>,
    pub robust_acc: Option<f64>,
    pub loss_n: Option<f64>,
    pub loss_r: Option<f64>,
    pub communicated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaMetrics {
    pub learner: Learner,
    pub snapshots: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub steps: u64,
    pub rows: Vec<EpochMetrics>,
    /// Evaluation of the returned parameters after the last epoch.
    pub final_eval: Option<EvalReport>,
    pub wa: Vec<WaMetrics>,
}

impl MetricsReport {
    fn new(method: Method) -> Self {
        Self {
            method,
            steps: 0,
            rows: Vec::new(),
            final_eval: None,
            wa: Vec::new(),
        }
    }
}

/// A failed run with everything recorded up to the failure.
#[derive(Debug, Error)]
#[error("{source}")]
pub struct RunError {
    #[source]
    pub source: TrainError,
    pub report: Box<MetricsReport>,
}

fn fail(source: TrainError, report: &MetricsReport) -> RunError {
    RunError {
        source,
        report: Box::new(report.clone()),
    }
}

fn wa_metrics(
    monitor: &Monitor,
    spec: &ModelSpec,
    sources: &[(Learner, &Option<WaAccumulator>)],
) -> Result<Vec<WaMetrics>, TrainError> {
    let mut out = Vec::new();
    for &(learner, acc) in sources {
        let Some(acc) = acc else { continue };
        if acc.count() == 0 {
            continue;
        }
        let params = acc.value().expect("non-empty");
        let r = monitor.report(spec, &params)?;
        out.push(WaMetrics {
            learner,
            snapshots: acc.count(),
            clean_acc: r.clean_acc,
            robust_acc: r.robust_acc().expect("monitor attacks"),
        });
    }
    Ok(out)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains for `config.epochs` epochs and returns the global parameters.
/// `train_n` feeds the natural learner and `train_r` the robust one (usually
/// the same set, drawn in different orders).
pub fn run(
    config: &GeneralistConfig,
    train_n: &Dataset,
    train_r: &Dataset,
    monitor: Option<&Monitor>,
) -> Result<(ParamVector, MetricsReport), RunError> {
    let mut report = MetricsReport::new(Method::Generalist);
    let setup = || -> Result<GeneralistState, TrainError> {
        config.validate()?;
        config.check_data(train_n)?;
        config.check_data(train_r)?;
        if config.shared_batches && train_n.len() != train_r.len() {
            return Err(TrainError::InvalidConfig(
                "shared_batches needs equally sized datasets".into(),
            ));
        }
        GeneralistState::new(config)
    };
    let mut state = setup().map_err(|e| fail(e, &report))?;
    let mut stream_n = BatchStream::new(train_n.len(), config.batch_size, derive_seed(config.seed, "n"));
    let r_label = if config.shared_batches { "n" } else { "r" };
    let mut stream_r = BatchStream::new(train_r.len(), config.batch_size, derive_seed(config.seed, r_label));
    let steps = config.steps(train_n.len());

    for e in 0..config.epochs {
        let epoch = e as f64;
        let (mut losses_n, mut losses_r) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
        for _ in 0..steps {
            let (xn, yn) = stream_n.next_batch(train_n);
            let (xr, yr) = stream_r.next_batch(train_r);
            match train_step(&mut state, config, (&xn, &yn), (&xr, &yr)) {
                Ok(l) => {
                    losses_n.push(l.natural);
                    losses_r.push(l.robust);
                }
                Err(err) => {
                    report.steps = state.step;
                    return Err(fail(err, &report));
                }
            }
        }
        let communicated = end_of_epoch(&mut state, config);
        let eval = match monitor.filter(|m| m.due(e + 1, config.epochs)) {
            Some(m) => Some(
                m.report(&config.model, &state.global)
                    .map_err(|err| fail(err, &report))?,
            ),
            None => None,
        };
        report.steps = state.step;
        report.rows.push(EpochMetrics {
            epoch: e + 1,
            gamma: Some(gamma_at(&config.gamma, epoch)),
            lr_n: Some(config.optim_n.lr_at(epoch)),
            lr_r: Some(config.optim_r.lr_at(epoch)),
            clean_acc: eval.as_ref().map(|r| r.clean_acc),
            robust_acc: eval.as_ref().and_then(|r| r.robust_acc()),
            loss_n: mean(&losses_n),
            loss_r: mean(&losses_r),
            communicated,
        });
        if e + 1 == config.epochs {
            report.final_eval = eval;
        }
    }
    if let Some(m) = monitor {
        if report.final_eval.is_none() {
            report.final_eval = Some(
                m.report(&config.model, &state.global)
                    .map_err(|err| fail(err, &report))?,
            );
        }
        let sources = [
            (Learner::Natural, &state.natural.wa),
            (Learner::Robust, &state.robust.wa),
            (Learner::Global, &state.wa_global),
        ];
        report.wa = wa_metrics(m, &config.model, &sources).map_err(|err| fail(err, &report))?;
    }
    Ok((state.global, report))
}

/// Single-learner training: `Nt` steps on clean batches with `optim_n`, `At`
/// steps on PGD examples with `optim_r`. Initialization, batch order and
/// attack randomness are drawn exactly as for the natural learner of [`run`].
pub fn run_baseline(
    method: Method,
    config: &GeneralistConfig,
    train: &Dataset,
    monitor: Option<&Monitor>,
) -> Result<(ParamVector, MetricsReport), RunError> {
    let mut report = MetricsReport::new(method);
    let adversarial = match method {
        Method::Nt => false,
        Method::At => true,
        Method::Generalist => {
            return Err(fail(
                TrainError::InvalidConfig("run_baseline takes nt or at".into()),
                &report,
            ))
        }
    };
    let (optim, wa, who) = if adversarial {
        (&config.optim_r, config.wa.robust, Learner::Robust)
    } else {
        (&config.optim_n, config.wa.natural, Learner::Natural)
    };
    let setup = || -> Result<LearnerState, TrainError> {
        config.validate()?;
        config.check_data(train)?;
        let init = init_params(&config.model, derive_seed(config.seed, "init"))?;
        LearnerState::new(&config.model, init, optim.clone(), wa)
    };
    let mut learner = setup().map_err(|e| fail(e, &report))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "attack"));
    let mut stream = BatchStream::new(train.len(), config.batch_size, derive_seed(config.seed, "n"));
    let steps = config.steps(train.len());
    let mut step = 0u64;

    for e in 0..config.epochs {
        let epoch = e as f64;
        let lr = optim.lr_at(epoch);
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (x, y) = stream.next_batch(train);
            let attack = adversarial.then_some((&config.attack, &mut rng));
            match learner.step(who, step, &x, &y, lr, attack) {
                Ok(l) => losses.push(l),
                Err(err) => {
                    report.steps = step;
                    return Err(fail(err, &report));
                }
            }
            step += 1;
        }
        if e + 1 > config.wa.warmup {
            if let Some(acc) = &mut learner.wa {
                acc.push(&learner.params).expect("lengths agree");
            }
        }
        let eval = match monitor.filter(|m| m.due(e + 1, config.epochs)) {
            Some(m) => Some(
                m.report(&config.model, &learner.params)
                    .map_err(|err| fail(err, &report))?,
            ),
            None => None,
        };
        report.steps = step;
        report.rows.push(EpochMetrics {
            epoch: e + 1,
            gamma: None,
            lr_n: (!adversarial).then_some(lr),
            lr_r: adversarial.then_some(lr),
            clean_acc: eval.as_ref().map(|r| r.clean_acc),
            robust_acc: eval.as_ref().and_then(|r| r.robust_acc()),
            loss_n: if adversarial { None } else { mean(&losses) },
            loss_r: if adversarial { mean(&losses) } else { None },
            communicated: false,
        });
        if e + 1 == config.epochs {
            report.final_eval = eval;
        }
    }
    if let Some(m) = monitor {
        if report.final_eval.is_none() {
            report.final_eval = Some(
                m.report(&config.model, &learner.params)
                    .map_err(|err| fail(err, &report))?,
            );
        }
        report.wa = wa_metrics(m, &config.model, &[(who, &learner.wa)]).map_err(|err| fail(err, &report))?;
    }
    Ok((learner.params, report))
}
