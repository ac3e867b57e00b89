//! Run configuration documents (TOML) and `--set a.b=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::AttackSpec;
use crate::data::{load_idx, make_blobs, DataError, Dataset};
use crate::models::{ConvPadding, ModelKind, ModelSpec};
use crate::optim::{OptimizerSpec, Schedule};
use crate::trainer::{ExecMode, GeneralistConfig, Method, WaConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected dotted.path=value")]
    Override(String),
    #[error("unsupported schema_version {found} (this build reads {SCHEMA_VERSION})")]
    Version { found: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian clusters; the test split uses a derived seed.
    Blobs {
        n_per_class: usize,
        test_per_class: usize,
        centers: Vec<Vec<f64>>,
        sigma: f64,
        #[serde(default)]
        seed: u64,
    },
    /// IDX image and label files.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first N training samples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
        #[serde(default = "default_classes")]
        classes: usize,
    },
}

fn default_classes() -> usize {
    10
}

impl DataConfig {
    /// Training and test splits.
    pub fn load(&self) -> Result<(Dataset, Dataset), DataError> {
        match self {
            DataConfig::Blobs {
                n_per_class,
                test_per_class,
                centers,
                sigma,
                seed,
            } => Ok((
                make_blobs(*n_per_class, centers, *sigma, *seed)?,
                make_blobs(*test_per_class, centers, *sigma, crate::derive_seed(*seed, "test"))?,
            )),
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
                classes,
            } => {
                let limit = |d: Dataset, n: &Option<usize>| match n {
                    Some(n) => d.take(*n),
                    None => d,
                };
                let train = limit(load_idx(train_images, train_labels)?, train_limit).with_classes(*classes)?;
                let test = limit(load_idx(test_images, test_labels)?, test_limit).with_classes(*classes)?;
                Ok((train, test))
            }
        }
    }
}

fn default_channels() -> [usize; 2] {
    [8, 16]
}

fn default_true() -> bool {
    true
}

/// Model architecture; input shape and class count come from the data when
/// left out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_channels")]
    pub channels: [usize; 2],
    #[serde(default)]
    pub padding: ConvPadding,
    #[serde(default = "default_true")]
    pub bias: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    #[serde(default)]
    pub mode: ExecMode,
    #[serde(default)]
    pub shared_batches: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimPair {
    pub n: OptimizerSpec,
    pub r: OptimizerSpec,
}

fn default_alpha() -> f64 {
    0.999
}

fn default_c() -> usize {
    1
}

fn default_gamma() -> Schedule {
    Schedule::constant(0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralistSection {
    #[serde(default)]
    pub t_prime: usize,
    #[serde(default = "default_c")]
    pub c: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_gamma")]
    pub gamma: Schedule,
    #[serde(default)]
    pub ema_start_epoch: usize,
    #[serde(default = "default_true")]
    pub reset_optimizer: bool,
    #[serde(default)]
    pub wa: WaConfig,
}

impl Default for GeneralistSection {
    fn default() -> Self {
        Self {
            t_prime: 0,
            c: default_c(),
            alpha: default_alpha(),
            gamma: default_gamma(),
            ema_start_epoch: 0,
            reset_optimizer: true,
            wa: WaConfig::default(),
        }
    }
}

fn default_eval_steps() -> usize {
    20
}

/// Held-out evaluation of the returned parameters. The attack radius
/// defaults to the training radius and the step size to a quarter of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default = "default_eval_steps")]
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default = "default_true")]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate every N epochs (0: only after the last).
    #[serde(default)]
    pub every: usize,
    /// Evaluate on the first N test samples only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eps: None,
            steps: default_eval_steps(),
            step_size: None,
            random_start: true,
            seed: 0,
            every: 0,
            limit: None,
        }
    }
}

fn default_method() -> Method {
    Method::Generalist
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training attack.
    pub attack: AttackSpec,
    pub optim: OptimPair,
    #[serde(default)]
    pub generalist: GeneralistSection,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Parses a TOML scalar, array or inline table; anything else is a string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a parsed document, creating tables as needed.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::Override(assignment.into()));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut table = doc;
    for key in parents {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(assignment.into()))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Version {
                found: config.schema_version,
            });
        }
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills in the model's input shape and class count from the data.
    pub fn materialize(&mut self, train: &Dataset) {
        self.model
            .input_shape
            .get_or_insert_with(|| train.sample_shape().to_vec());
        self.model.classes.get_or_insert(train.classes());
    }

    pub fn model_spec(&self) -> Result<ModelSpec, ConfigError> {
        let m = &self.model;
        let (Some(input_shape), Some(classes)) = (m.input_shape.clone(), m.classes) else {
            return Err(ConfigError::Invalid(
                "model input_shape and classes are unresolved".into(),
            ));
        };
        Ok(ModelSpec {
            kind: m.kind,
            input_shape,
            classes,
            hidden: m.hidden.clone(),
            channels: m.channels,
            padding: m.padding,
            bias: m.bias,
        })
    }

    pub fn generalist_config(&self) -> Result<GeneralistConfig, ConfigError> {
        let g = &self.generalist;
        let config = GeneralistConfig {
            model: self.model_spec()?,
            attack: self.attack.clone(),
            optim_n: self.optim.n.clone(),
            optim_r: self.optim.r.clone(),
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            steps_per_epoch: self.train.steps_per_epoch,
            t_prime: g.t_prime,
            c: g.c,
            alpha: g.alpha,
            gamma: g.gamma.clone(),
            ema_start_epoch: g.ema_start_epoch,
            reset_optimizer: g.reset_optimizer,
            wa: g.wa.clone(),
            shared_batches: self.train.shared_batches,
            seed: self.seed,
            mode: self.train.mode,
        };
        config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(config)
    }

    /// Evaluation attack with defaults applied.
    pub fn eval_attack(&self) -> AttackSpec {
        let eps = self.eval.eps.unwrap_or(self.attack.eps);
        AttackSpec {
            eps,
            step_size: self.eval.step_size.unwrap_or(eps / 4.0),
            steps: self.eval.steps,
            random_start: self.eval.random_start,
            clamp: self.attack.clamp,
        }
    }
}
