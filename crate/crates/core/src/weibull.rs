//! Two-parameter Weibull fitting on distribution tails.

use serde::{Deserialize, Serialize};
use thiserror::Error;

const SHAPE_LO: f64 = 0.05;
const SHAPE_HI: f64 = 50.0;
const SHAPE_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum WeibullError {
    #[error("need at least {needed} values to fit a tail, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("tail values are all equal to {value}; no maximum-likelihood fit exists")]
    DegenerateTail { value: f64 },
}

/// Fitted Weibull parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weibull {
    pub shape: f64,
    pub scale: f64,
}

impl Weibull {
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        -(-(x / self.scale).powf(self.shape)).exp_m1()
    }

    /// Inverse CDF for `q` in `[0, 1)`.
    pub fn quantile(&self, q: f64) -> f64 {
        self.scale * (-(-q).ln_1p()).powf(1.0 / self.shape)
    }
}

/// Profile-likelihood score for the shape parameter on normalized data
/// (`x / max(x)`), together with its derivative.
///
/// g(k) = sum(x^k ln x) / sum(x^k) - 1/k - mean(ln x); increasing in k.
fn shape_score(logs: &[f64], mean_log: f64, k: f64) -> (f64, f64) {
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for &l in logs {
        let p = (k * l).exp();
        s0 += p;
        s1 += p * l;
        s2 += p * l * l;
    }
    let a = s1 / s0;
    let g = a - 1.0 / k - mean_log;
    let dg = s2 / s0 - a * a + 1.0 / (k * k);
    (g, dg)
}

/// Maximum-likelihood Weibull fit over all of `values` (which must be
/// positive).
pub fn fit_weibull(values: &[f64]) -> Result<Weibull, WeibullError> {
    let positive: Vec<f64> = values.iter().copied().filter(|&v| v > 0.0 && v.is_finite()).collect();
    if positive.len() < 2 {
        return match values.first() {
            Some(&v) if values.len() >= 2 && values.iter().all(|&x| x == v) => {
                Err(WeibullError::DegenerateTail { value: v })
            }
            _ => Err(WeibullError::InsufficientSamples {
                needed: 2,
                got: positive.len(),
            }),
        };
    }
    let max = positive.iter().copied().fold(f64::MIN, f64::max);
    let min = positive.iter().copied().fold(f64::MAX, f64::min);
    if min == max {
        return Err(WeibullError::DegenerateTail { value: max });
    }
    // Normalizing by the maximum keeps x^k in (0, 1] for every k in the
    // bracket; the shape estimate is scale invariant.
    let logs: Vec<f64> = positive.iter().map(|&v| (v / max).ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / logs.len() as f64;

    let (mut lo, mut hi) = (SHAPE_LO, SHAPE_HI);
    let shape = if shape_score(&logs, mean_log, lo).0 >= 0.0 {
        lo
    } else if shape_score(&logs, mean_log, hi).0 <= 0.0 {
        hi
    } else {
        let mut k = 1.0f64.clamp(lo, hi);
        for _ in 0..500 {
            let (g, dg) = shape_score(&logs, mean_log, k);
            if g > 0.0 {
                hi = k;
            } else {
                lo = k;
            }
            // Newton step, falling back to bisection when it leaves the bracket.
            let mut next = k - g / dg;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            let done = (next - k).abs() < SHAPE_TOL || hi - lo < SHAPE_TOL;
            k = next;
            if done {
                break;
            }
        }
        k
    };

    let mean_pow = logs.iter().map(|&l| (shape * l).exp()).sum::<f64>() / logs.len() as f64;
    let scale = max * mean_pow.powf(1.0 / shape);
    Ok(Weibull { shape, scale })
}

/// Fits a Weibull to the `tail_size` largest values of `distances`.
pub fn fit_weibull_tail(distances: &[f64], tail_size: usize) -> Result<Weibull, WeibullError> {
    if tail_size < 3 || distances.len() < tail_size {
        return Err(WeibullError::InsufficientSamples {
            needed: tail_size.max(3),
            got: distances.len(),
        });
    }
    fit_weibull(&largest(distances, tail_size))
}

/// The `n` largest values, in ascending order.
pub fn largest(values: &[f64], n: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.split_off(sorted.len() - n.min(sorted.len()))
}
