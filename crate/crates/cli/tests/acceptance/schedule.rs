use generalist_core::optim::Schedule;
use generalist_core::{gamma_at, should_communicate};

use crate::common::ensure;
use crate::Outcome;

/// Values at epochs 0/40/80/120 and the analytic values halfway between.
const STRATEGIES: [([f64; 4], [f64; 3]); 4] = [
    ([1.0, 1.0, 1.0, 0.0], [1.0, 1.0, 0.5]),
    ([1.0, 1.0, 0.8, 0.2], [1.0, 0.9, 0.5]),
    ([0.5, 0.5, 0.5, 0.5], [0.5, 0.5, 0.5]),
    ([1.0, 1.0, 1.0, 0.5], [1.0, 1.0, 0.75]),
];

pub fn criterion() -> Outcome {
    let mut rows = 0;
    for t_prime in [0usize, 75] {
        for c in [1usize, 5, 10, 15] {
            for t in 0..=300usize {
                // Oracle: count back from t in steps of c and see whether 0 is hit.
                let mut r = t;
                while r >= c {
                    r -= c;
                }
                let expected = t >= t_prime && r == 0;
                ensure(should_communicate(t, t_prime, c) == expected, || {
                    format!("should_communicate({t}, {t_prime}, {c}) != {expected}")
                })?;
                rows += 1;
            }
        }
    }

    let mut probes = 0;
    for (values, mids) in STRATEGIES {
        let schedule = if values.iter().all(|v| *v == values[0]) {
            Schedule::constant(values[0])
        } else {
            Schedule::evenly_spaced(&values, 120.0).map_err(|e| e.to_string())?
        };
        let at_breaks = [0.0, 40.0, 80.0, 120.0].iter().zip(values);
        let at_mids = [20.0, 60.0, 100.0].iter().zip(mids);
        let beyond = [(&150.0, values[3]), (&1e6, values[3])];
        for (&epoch, expected) in at_breaks.chain(at_mids).chain(beyond) {
            let got = gamma_at(&schedule, epoch);
            ensure(got == expected, || {
                format!("{values:?} at epoch {epoch}: {got} != {expected}")
            })?;
            probes += 1;
        }
    }
    Ok(format!("{rows} truth-table rows, {probes} schedule probes exact"))
}
