//! Bi-expert adversarial training.
//!
//! A natural learner trains on clean data and a robust learner on PGD
//! adversarial examples. A global learner follows an exponential moving
//! average of their mixed parameters and is periodically copied back into
//! both as a fresh initialization. The crate bundles the pieces this needs:
//! a small reverse-mode autodiff engine, MLP and CNN models, optimizers,
//! attacks, data loading, evaluation and an online-convex regret lab.

pub mod attacks;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod eval;
pub mod models;
pub mod optim;
pub mod regret;
pub mod trainer;

pub use attacks::{fgsm, pgd, project_linf, AttackError, AttackSpec};
pub use autodiff::{Array, AutodiffError, Graph};
pub use config::{ConfigError, RunConfig};
pub use data::{load_idx, make_blobs, write_idx, BatchStream, DataError, Dataset};
pub use eval::{clean_accuracy, per_class_report, robust_accuracy, EvalError, EvalReport};
pub use models::checkpoint::{self, CheckpointError};
pub use models::{ModelError, ModelInstance, ModelKind, ModelSpec, Network, ParamVector};
pub use optim::{ema_update, OptimError, Optimizer, OptimizerKind, OptimizerSpec, Schedule, WaAccumulator};
pub use trainer::{
    end_of_epoch, gamma_at, run, run_baseline, should_communicate, train_step, ExecMode, GeneralistConfig,
    GeneralistState, Method, MetricsReport, Monitor, RunError, TrainError,
};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent, reproducible sub-seed for a named random stream.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a of the label, then mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}
