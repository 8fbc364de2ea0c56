//! Point and probabilistic forecast scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{equal_tailed_interval, sort_floats};

/// Scores of one observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationScore {
    pub index: usize,
    pub y: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub squared_error: f64,
    pub absolute_error: f64,
    pub covered: bool,
    pub crps: f64,
}

/// Averages over the scored observations plus the per-observation detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub mse: f64,
    pub mad: f64,
    pub coverage: f64,
    pub crps: f64,
    pub level: f64,
    pub n_scored: usize,
    pub n_missing: usize,
    pub observations: Vec<ObservationScore>,
}

/// `E|X - y| - ½ E|X - X'|` over the empirical distribution of `sorted`,
/// in `O(m)` given sorted draws.
pub fn crps_sorted(sorted: &[f64], y: f64) -> f64 {
    let m = sorted.len() as f64;
    let abs: f64 = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
    // Σ_i Σ_j |x_i - x_j| = 2 Σ_i (2i - m - 1) x_(i), 1-based ranks
    let spread: f64 =
        sorted.iter().enumerate().map(|(i, x)| (2.0 * (i + 1) as f64 - m - 1.0) * x).sum::<f64>() * 2.0 / (m * m);
    abs - 0.5 * spread
}

/// The same estimator by direct double sum, `O(m²)`.
pub fn crps_pairwise(draws: &[f64], y: f64) -> f64 {
    let m = draws.len() as f64;
    let abs: f64 = draws.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
    let mut pair = 0.0;
    for a in draws {
        for b in draws {
            pair += (a - b).abs();
        }
    }
    abs - 0.5 * pair / (m * m)
}

/// Scores predictive draws against held-out values. `None` values are
/// skipped and counted in `n_missing`.
pub fn score(draws: &[Vec<f64>], y_true: &[Option<f64>], level: f64) -> Result<ScoreReport> {
    if draws.len() != y_true.len() {
        return Err(Error::usage(format!("{} draw sets for {} observations", draws.len(), y_true.len())));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::usage(format!("interval level {level} outside (0, 1)")));
    }
    let mut observations = Vec::new();
    let mut n_missing = 0;
    for (index, (d, y)) in draws.iter().zip(y_true).enumerate() {
        let Some(y) = *y else {
            n_missing += 1;
            continue;
        };
        if d.len() < 2 {
            return Err(Error::usage("at least two draws per observation are needed"));
        }
        let mut sorted = d.clone();
        sort_floats(&mut sorted);
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        let (lower, upper) = equal_tailed_interval(&sorted, level);
        observations.push(ObservationScore {
            index,
            y,
            mean,
            lower,
            upper,
            squared_error: (mean - y).powi(2),
            absolute_error: (mean - y).abs(),
            covered: lower <= y && y <= upper,
            crps: crps_sorted(&sorted, y),
        });
    }
    if observations.is_empty() {
        return Err(Error::usage("no observations to score"));
    }
    let n = observations.len() as f64;
    let avg = |f: &dyn Fn(&ObservationScore) -> f64| {
        let mut v: Vec<f64> = observations.iter().map(f).collect();
        // order-independent sum
        sort_floats(&mut v);
        v.iter().sum::<f64>() / n
    };
    Ok(ScoreReport {
        mse: avg(&|o| o.squared_error),
        mad: avg(&|o| o.absolute_error),
        coverage: avg(&|o| f64::from(u8::from(o.covered))),
        crps: avg(&|o| o.crps),
        level,
        n_scored: observations.len(),
        n_missing,
        observations,
    })
}
