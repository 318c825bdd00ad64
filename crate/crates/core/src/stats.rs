//! Small numeric helpers shared across modules.

use crate::error::{Error, Result};

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.compensation);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = CompensatedSum::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

pub fn mean(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// `n` evenly spaced points on `[lo, hi]`; endpoints are exact.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n).map(|i| if i == n - 1 { hi } else { lo + step * i as f64 }).collect()
        }
    }
}

/// `n` log-spaced points on `[lo, hi]` (both positive); endpoints are exact.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    linspace(a, b, n)
        .into_iter()
        .enumerate()
        .map(|(i, x)| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                x.exp()
            }
        })
        .collect()
}

/// Weighted median of `values` with positive `weights`. When the cumulative
/// weight hits exactly one half between two values, their midpoint is returned.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> Option<f64> {
    if values.is_empty() || values.len() != weights.len() {
        return None;
    }
    let mut pairs: Vec<(f64, f64)> = values.iter().copied().zip(weights.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let total = compensated_sum(pairs.iter().map(|p| p.1));
    let half = total / 2.0;
    let mut acc = CompensatedSum::default();
    for (k, &(v, w)) in pairs.iter().enumerate() {
        acc.add(w);
        let c = acc.value();
        if c > half {
            return Some(v);
        }
        if c == half {
            return Some(match pairs.get(k + 1) {
                Some(&(next, _)) => 0.5 * (v + next),
                None => v,
            });
        }
    }
    pairs.last().map(|p| p.0)
}

/// Exact minimizer over `L > 0` of `Σ |observed_i / L − target_i|`.
///
/// Substituting `u = 1/L` turns the objective into `Σ observed_i · |u − target_i / observed_i|`,
/// whose minimizer is the weighted median of the ratios.
pub fn l1_normalizer(observed: &[f64], target: &[f64]) -> Result<f64> {
    if observed.is_empty() {
        return Err(Error::Coverage("no points to align".into()));
    }
    if observed.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::InvalidArgument("alignment requires positive observed losses".into()));
    }
    let ratios: Vec<f64> = observed.iter().zip(target).map(|(p, r)| r / p).collect();
    let u = weighted_median(&ratios, observed).ok_or_else(|| Error::Coverage("no points to align".into()))?;
    if !(u > 0.0) || !u.is_finite() {
        return Err(Error::Degenerate(format!("alignment produced a nonpositive scale {u}")));
    }
    Ok(1.0 / u)
}
