use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("schedule has no breakpoints")]
    Empty,
    #[error("breakpoint epochs must be finite, non-negative and strictly increasing")]
    Epochs,
    #[error("breakpoint value {0} is not finite")]
    Value(f64),
}

/// Piecewise-linear function of the (fractional) epoch, held constant before
/// the first and after the last breakpoint. Used for learning rates and for
/// the mixing ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct Schedule {
    points: Vec<(f64, f64)>,
}

impl Schedule {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, ScheduleError> {
        if points.is_empty() {
            return Err(ScheduleError::Empty);
        }
        for (i, &(e, v)) in points.iter().enumerate() {
            if !e.is_finite() || e < 0.0 || (i > 0 && e <= points[i - 1].0) {
                return Err(ScheduleError::Epochs);
            }
            if !v.is_finite() {
                return Err(ScheduleError::Value(v));
            }
        }
        Ok(Self { points })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            points: vec![(0.0, value)],
        }
    }

    /// Values placed at evenly spaced epochs `0, span/(n-1), ..., span`,
    /// e.g. `(1, 1, 1, 0)` over 120 epochs gives breakpoints at 0/40/80/120.
    pub fn evenly_spaced(values: &[f64], span: f64) -> Result<Self, ScheduleError> {
        match values.len() {
            0 => Err(ScheduleError::Empty),
            1 => Self::new(vec![(0.0, values[0])]),
            n => Self::new(
                values
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (span * i as f64 / (n - 1) as f64, v))
                    .collect(),
            ),
        }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn min_value(&self) -> f64 {
        self.points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn at(&self, epoch: f64) -> f64 {
        let first = self.points[0];
        if epoch <= first.0 {
            return first.1;
        }
        for w in self.points.windows(2) {
            let ((e0, v0), (e1, v1)) = (w[0], w[1]);
            if epoch == e1 {
                return v1;
            }
            if epoch < e1 {
                if v0 == v1 {
                    return v0;
                }
                let t = (epoch - e0) / (e1 - e0);
                return (v0 + t * (v1 - v0)).max(v0.min(v1)).min(v0.max(v1));
            }
        }
        self.points[self.points.len() - 1].1
    }
}

impl TryFrom<Vec<(f64, f64)>> for Schedule {
    type Error = ScheduleError;

    fn try_from(points: Vec<(f64, f64)>) -> Result<Self, Self::Error> {
        Self::new(points)
    }
}

impl From<Schedule> for Vec<(f64, f64)> {
    fn from(s: Schedule) -> Self {
        s.points
    }
}
