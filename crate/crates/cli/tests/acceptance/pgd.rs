use generalist_core::{pgd, Array, AttackSpec, ModelSpec, Network};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::ensure;
use crate::Outcome;

const ORACLE_TRIALS: usize = 300;
const ORACLE_TOL: f64 = 1e-9;
const PROPERTY_CASES: u32 = 10_000;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Worst-case L∞ perturbation of a binary linear model, written out by hand:
/// logits `z = xW + b`, `∂ℓ/∂x_j = Σ_k (p_k − [k = y]) W_jk`.
fn closed_form(w: &[f64], b: &[f64], d: usize, x: &[f64], y: usize, eps: f64) -> Vec<f64> {
    let z: Vec<f64> = (0..2)
        .map(|k| (0..d).map(|j| x[j] * w[j * 2 + k]).sum::<f64>() + b[k])
        .collect();
    let m = z[0].max(z[1]);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let p: Vec<f64> = e.iter().map(|v| v / (e[0] + e[1])).collect();
    (0..d)
        .map(|j| {
            let g: f64 = (0..2)
                .map(|k| (p[k] - if k == y { 1.0 } else { 0.0 }) * w[j * 2 + k])
                .sum();
            x[j] + eps * sign(g)
        })
        .collect()
}

fn oracle_agreement() -> Result<(f64, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x96d);
    let mut worst = 0.0f64;
    let mut unclamped = 0;
    for trial in 0..ORACLE_TRIALS {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=4);
        let spec = ModelSpec::mlp(d, vec![], 2);
        let mut net = Network::new(&spec).unwrap();
        let w: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = [w.clone(), b.clone()].concat();
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let eps = rng.random_range(0.01..0.3);
        let attack = AttackSpec::pgd(eps, eps, 1).without_random_start();
        let xa = Array::new(vec![n, d], x.clone()).unwrap();
        let adv = pgd(&mut net, &params, &xa, &y, &attack, &mut rng).map_err(|e| e.to_string())?;
        for i in 0..n {
            let expect = closed_form(&w, &b, d, &x[i * d..(i + 1) * d], y[i], eps);
            for j in 0..d {
                let got = adv.data()[i * d + j];
                let e = expect[j];
                if (0.0..=1.0).contains(&e) {
                    unclamped += 1;
                    worst = worst.max((got - e).abs());
                } else if got != e.clamp(0.0, 1.0) {
                    return Err(format!(
                        "trial {trial}: clamped coordinate {got} != {}",
                        e.clamp(0.0, 1.0)
                    ));
                }
            }
        }
    }
    Ok((worst, unclamped))
}

fn ball_property() -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (
        1usize..6,
        prop_oneof![Just(vec![]), (1usize..5).prop_map(|h| vec![h])],
        2usize..4,
        0.0f64..0.5,
        0.001f64..0.3,
        0usize..8,
        any::<bool>(),
        any::<u64>(),
    );
    runner
        .run(
            &strategy,
            |(d, hidden, classes, eps, kappa, steps, random_start, seed)| {
                let spec = ModelSpec::mlp(d, hidden, classes);
                let mut net = Network::new(&spec).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let params: Vec<f64> = (0..net.param_count()).map(|_| rng.random_range(-3.0..3.0)).collect();
                let n = 3;
                let x = Array::new(vec![n, d], (0..n * d).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap();
                let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
                let mut attack = AttackSpec::pgd(eps, kappa, steps);
                attack.random_start = random_start;
                let adv = pgd(&mut net, &params, &x, &y, &attack, &mut rng)
                    .map_err(|e| TestCaseError::fail(e.to_string()))?;
                let bound = eps + 4.0 * f64::EPSILON;
                for (a, o) in adv.data().iter().zip(x.data()) {
                    prop_assert!((a - o).abs() <= bound, "|{a} - {o}| > {bound}");
                    prop_assert!((0.0..=1.0).contains(a), "{a} outside [0, 1]");
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn criterion() -> Outcome {
    let (worst, unclamped) = oracle_agreement()?;
    ensure(worst < ORACLE_TOL, || format!("closed form differs by {worst:e}"))?;
    ball_property()?;
    Ok(format!(
        "closed form max diff {worst:.1e} over {unclamped} coords; {PROPERTY_CASES} ball/box cases hold"
    ))
}
