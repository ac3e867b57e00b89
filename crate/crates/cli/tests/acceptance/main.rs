//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Pass criterion numbers to run a subset: `cargo test --test acceptance -- 3 4`.
//! The MNIST criterion reads IDX files from `$MNIST_DIR` (default
//! `<workspace>/data/mnist`); set `ACCEPTANCE_SKIP_MNIST=1` to skip it
//! explicitly when the files are unavailable.

mod autodiff;
mod common;
mod io;
mod pgd;
mod regret;
mod schedule;
mod training;

use std::panic;
use std::time::Instant;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        id: 1,
        name: "autodiff vs finite differences",
        run: autodiff::criterion,
    },
    Criterion {
        id: 2,
        name: "PGD closed form and ball invariants",
        run: pgd::criterion,
    },
    Criterion {
        id: 3,
        name: "communication and mixing schedules",
        run: schedule::criterion,
    },
    Criterion {
        id: 4,
        name: "three-step update oracle",
        run: training::micro_oracle,
    },
    Criterion {
        id: 5,
        name: "degenerate settings",
        run: training::degeneracy,
    },
    Criterion {
        id: 6,
        name: "serial vs parallel determinism",
        run: training::determinism,
    },
    Criterion {
        id: 7,
        name: "tradeoff direction on blobs",
        run: training::blobs_tradeoff,
    },
    Criterion {
        id: 8,
        name: "tradeoff direction on MNIST",
        run: training::mnist_tradeoff,
    },
    Criterion {
        id: 9,
        name: "excess-risk bound trials",
        run: regret::criterion,
    },
    Criterion {
        id: 10,
        name: "I/O round trips",
        run: io::criterion,
    },
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let wanted: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let quiet_panics = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));

    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let outcome = panic::catch_unwind(c.run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) if d.starts_with(training::SKIPPED) => ("SKIP", d),
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {:<40} {tag} [{secs:.1}s] {detail}", c.id, c.name);
    }
    panic::set_hook(quiet_panics);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
