use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use generalist_cli::{cmd_eval, cmd_regret, cmd_sweep, cmd_train, AttackFlags, CliError, EvalData, RegretArgs};
use generalist_core::Method;

/// Bi-expert adversarial training experiments.
#[derive(Parser)]
#[command(name = "generalist", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunSource {
    /// TOML run config.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Re-run the resolved config recorded in a manifest.json.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its artifacts.
    Train {
        #[command(flatten)]
        source: RunSource,
        /// generalist, nt or at; overrides the config.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Dotted-path override, e.g. `generalist.c=5`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on clean and PGD inputs.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use the test split and evaluation settings of this config.
        #[arg(long, conflicts_with_all = ["images", "labels"])]
        config: Option<PathBuf>,
        /// Override applied to --config. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE", requires = "config")]
        overrides: Vec<String>,
        /// IDX image file to evaluate instead of a config's test split.
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        /// IDX label file matching --images.
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
        /// L-infinity radius of the evaluation attack.
        #[arg(long)]
        eps: Option<f64>,
        /// PGD steps.
        #[arg(long)]
        steps: Option<usize>,
        /// PGD step size; eps / 4 when only --eps is given.
        #[arg(long)]
        step_size: Option<f64>,
        /// Seed of the random start.
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate the first N samples only.
        #[arg(long)]
        limit: Option<usize>,
        /// JSON report path; the report is printed either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the excess-risk bound over repeated online-convex trials.
    Regret {
        /// Independent trials.
        #[arg(long, default_value_t = RegretArgs::default().trials)]
        trials: usize,
        /// Online rounds per trial.
        #[arg(long, default_value_t = RegretArgs::default().horizon)]
        horizon: usize,
        /// Confidence level of the bound, in (0, 1].
        #[arg(long, default_value_t = RegretArgs::default().delta)]
        delta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Parameter dimension.
        #[arg(long, default_value_t = RegretArgs::default().dim)]
        dim: usize,
        /// Held-out losses per task for the expectations.
        #[arg(long, default_value_t = RegretArgs::default().holdout)]
        holdout: usize,
        /// Initial OGD step size.
        #[arg(long, default_value_t = RegretArgs::default().lr)]
        lr: f64,
        /// Per-trial CSV.
        #[arg(long, default_value = "regret.csv")]
        out: PathBuf,
        /// Optional JSON with the aggregate numbers.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Train every cell of a grid of overrides.
    Sweep {
        /// Base TOML run config.
        #[arg(long)]
        config: PathBuf,
        /// generalist, nt or at; overrides the config.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Override applied to every cell. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// `key=v1;v2;...`. Repeatable; cells are the cartesian product.
        #[arg(long = "axis", value_name = "KEY=V1;V2")]
        axes: Vec<String>,
        /// Sweep directory; each cell gets a subdirectory.
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "generalist" => Ok(Method::Generalist),
        "nt" => Ok(Method::Nt),
        "at" => Ok(Method::At),
        _ => Err(format!("unknown method `{s}` (generalist, nt, at)")),
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train {
            source,
            method,
            overrides,
            out,
        } => {
            let o = cmd_train(source.config, source.manifest, method, &overrides, &out)?;
            if let Some(s) = &o.summary {
                print_json(s);
            }
        }
        Command::Eval {
            checkpoint,
            config,
            overrides,
            images,
            labels,
            eps,
            steps,
            step_size,
            seed,
            limit,
            out,
        } => {
            let data = match (config, images, labels) {
                (Some(path), None, None) => EvalData::Config { path, overrides },
                (None, Some(images), Some(labels)) => EvalData::Idx { images, labels },
                _ => {
                    return Err(CliError::Usage(
                        "eval needs --config or both --images and --labels".into(),
                    ))
                }
            };
            let flags = AttackFlags {
                eps,
                steps,
                step_size,
                seed,
                limit,
            };
            print_json(&cmd_eval(&checkpoint, &data, &flags, out.as_deref())?);
        }
        Command::Regret {
            trials,
            horizon,
            delta,
            seed,
            dim,
            holdout,
            lr,
            out,
            summary,
        } => {
            let args = RegretArgs {
                trials,
                horizon,
                delta,
                seed,
                dim,
                holdout,
                lr,
            };
            print_json(&cmd_regret(&args, &out, summary.as_deref())?);
        }
        Command::Sweep {
            config,
            method,
            overrides,
            axes,
            out,
        } => {
            let m = cmd_sweep(&config, method, &overrides, &axes, &out)?;
            println!("{} cells written to {}", m.cells.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
