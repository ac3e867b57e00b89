//! Experiment runner behind the `generalist` binary.
//!
//! Each subcommand is a plain function returning [`CliError`], whose
//! [`CliError::exit_code`] gives the process status.

pub mod error;
pub mod eval;
pub mod regret;
pub mod sweep;
pub mod train;

pub use error::{exit, CliError};
pub use eval::{cmd_eval, AttackFlags, EvalData};
pub use regret::{cmd_regret, RegretArgs, RegretSummary};
pub use sweep::{cmd_sweep, Axis, SweepManifest};
pub use train::{cmd_train, train, Outcome, RunManifest, Summary};
