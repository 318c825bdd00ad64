//! Collapse coordinates: `ℓ(t̂) = (L(t̂) − L̂) / (L_T − L̂)` with `L̂ = 0` by
//! default, and residuals between normalized curves.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::curve::{interpolate, LossCurve};
use crate::error::{invalid_arg, Error, Result};
use crate::fmt::g17;
use crate::scaling::ChinchillaFit;
use crate::stats::{compensated_sum, l1_normalizer, linspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMethod {
    FinalLoss,
    EarlyAlign,
    PowerLawEstimate,
    /// Loaded from a file; the normalizer that produced it is unknown.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedCurve {
    /// `(t̂, ℓ)` pairs, strictly increasing in `t̂`.
    pub points: Vec<(f64, f64)>,
    /// `L_T`.
    pub normalizer: f64,
    pub method: NormalizeMethod,
    /// `L̂`.
    pub offset: f64,
}

impl NormalizedCurve {
    pub fn from_curve(curve: &LossCurve, normalizer: f64, offset: f64, method: NormalizeMethod) -> Result<Self> {
        if !(normalizer > 0.0) || !normalizer.is_finite() {
            return Err(invalid_arg(format!("normalizer must be positive, got {normalizer}")));
        }
        if !(offset >= 0.0) || !(offset < normalizer) {
            return Err(invalid_arg(format!("offset {offset} must lie in [0, {normalizer})")));
        }
        let scale = normalizer - offset;
        let points = curve.training_fraction().into_iter().map(|(t, l)| (t, (l - offset) / scale)).collect();
        Ok(Self { points, normalizer, method, offset })
    }

    /// A curve from explicit points (e.g. a reference file).
    pub fn from_points(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput);
        }
        if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(invalid_arg("normalized curve abscissae must strictly increase"));
        }
        if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(invalid_arg("normalized curve values must be finite"));
        }
        Ok(Self { points, normalizer: 1.0, method: NormalizeMethod::External, offset: 0.0 })
    }

    pub fn coverage(&self) -> (f64, f64) {
        (self.points[0].0, self.points[self.points.len() - 1].0)
    }

    pub fn covers(&self, lo: f64, hi: f64) -> bool {
        let (a, b) = self.coverage();
        a <= lo && b >= hi
    }

    pub fn resample(&self, grid: &[f64]) -> Result<Vec<f64>> {
        interpolate(&self.points, grid)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_hat,ell\n");
        for &(t, l) in &self.points {
            let _ = writeln!(out, "{},{}", g17(t), g17(l));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(Error::EmptyInput)?;
        if header.trim() != "t_hat,ell" {
            return Err(Error::Parse { row: 0, message: format!("expected header t_hat,ell, got {header:?}") });
        }
        let mut points = Vec::new();
        for (row, line) in lines.enumerate() {
            let (t, l) =
                line.split_once(',').ok_or_else(|| Error::Parse { row, message: "expected two columns".into() })?;
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse { row, message: e.to_string() });
            points.push((parse(t)?, parse(l)?));
        }
        Self::from_points(points)
    }
}

/// Divides by the final loss (`L̂ = 0`). The curve must be complete; pass a
/// smoothed curve to normalize by the final smoothed loss.
pub fn normalize_final(curve: &LossCurve) -> Result<NormalizedCurve> {
    normalize_final_with_offset(curve, 0.0)
}

pub fn normalize_final_with_offset(curve: &LossCurve, offset: f64) -> Result<NormalizedCurve> {
    if !curve.complete() {
        return Err(Error::Coverage(format!(
            "curve {} is incomplete: last step {} of {}",
            curve.run_id(),
            curve.samples().last().map(|s| s.step).unwrap_or(0),
            curve.total_steps()
        )));
    }
    NormalizedCurve::from_curve(curve, curve.final_loss(), offset, NormalizeMethod::FinalLoss)
}

/// Training-fraction window used for early alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignWindow {
    pub lo: f64,
    pub hi: f64,
}

impl Default for AlignWindow {
    fn default() -> Self {
        Self { lo: 0.25, hi: 0.50 }
    }
}

impl AlignWindow {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lo && self.lo < self.hi && self.hi <= 1.0) {
            return Err(invalid_arg(format!("invalid alignment window [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }
}

/// Chooses `L_T` for an in-progress curve so that `partial / L_T` best matches
/// `reference` (mean absolute difference) at the partial's samples inside
/// `window`.
pub fn normalize_early_align(
    partial: &LossCurve,
    reference: &NormalizedCurve,
    window: AlignWindow,
) -> Result<NormalizedCurve> {
    let normalizer = align_normalizer(partial, reference, window)?;
    NormalizedCurve::from_curve(partial, normalizer, 0.0, NormalizeMethod::EarlyAlign)
}

/// The `L_T` minimizing `Σ |L(t̂_i) / L_T − ℓ_ref(t̂_i)|` over samples in `window`.
pub fn align_normalizer(partial: &LossCurve, reference: &NormalizedCurve, window: AlignWindow) -> Result<f64> {
    window.validate()?;
    if reference.points.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(partial.first_t_hat() <= window.lo && partial.last_t_hat() >= window.hi) {
        return Err(Error::Coverage(format!(
            "partial curve covers [{}, {}], alignment window is [{}, {}]",
            partial.first_t_hat(),
            partial.last_t_hat(),
            window.lo,
            window.hi
        )));
    }
    if !reference.covers(window.lo, window.hi) {
        let (a, b) = reference.coverage();
        return Err(Error::Coverage(format!(
            "reference covers [{a}, {b}], alignment window is [{}, {}]",
            window.lo, window.hi
        )));
    }
    let (ts, observed): (Vec<f64>, Vec<f64>) =
        partial.training_fraction().into_iter().filter(|(t, _)| *t >= window.lo && *t <= window.hi).unzip();
    let target = reference.resample(&ts)?;
    l1_normalizer(&observed, &target)
}

/// Normalizes by the loss a fitted scaling law predicts at `(N, D)`.
pub fn normalize_estimate(curve: &LossCurve, fit: &ChinchillaFit, n: f64, d: f64) -> Result<NormalizedCurve> {
    let lt = fit.loss(n, d);
    if !(lt > 0.0) || !lt.is_finite() {
        return Err(invalid_arg(format!("scaling-law estimate L(T) = {lt} is not positive")));
    }
    NormalizedCurve::from_curve(curve, lt, 0.0, NormalizeMethod::PowerLawEstimate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub onset: f64,
    /// Signed residual of largest magnitude during the episode.
    pub peak: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// `(t̂, ℓ_a − ℓ_b)`.
    pub points: Vec<(f64, f64)>,
    /// `(t̂, mean |residual| over the trailing window)`.
    pub rolling_mae: Vec<(f64, f64)>,
    pub alerts: Vec<Alert>,
    pub annotations: Vec<(f64, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub max_abs: f64,
    pub mean_abs: f64,
    /// Largest rolling mean absolute residual.
    pub rolling_mae: f64,
}

impl ResidualReport {
    pub fn summary(&self) -> ResidualSummary {
        let abs: Vec<f64> = self.points.iter().map(|p| p.1.abs()).collect();
        ResidualSummary {
            max_abs: abs.iter().copied().fold(0.0, f64::max),
            mean_abs: if abs.is_empty() { 0.0 } else { compensated_sum(abs.iter().copied()) / abs.len() as f64 },
            rolling_mae: self.rolling_mae.iter().map(|p| p.1).fold(0.0, f64::max),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_hat,resid\n");
        for &(t, r) in &self.points {
            let _ = writeln!(out, "{},{}", g17(t), g17(r));
        }
        out
    }
}

pub const DEFAULT_GRID_POINTS: usize = 512;
pub const DEFAULT_ROLLING_WINDOW: f64 = 0.02;

/// `n` uniform points on `[0, 1]` restricted to `[lo, hi]`.
pub fn uniform_grid_within(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    linspace(0.0, 1.0, n).into_iter().filter(|&t| t >= lo && t <= hi).collect()
}

/// The default residual grid: 512 uniform points inside both coverages.
pub fn shared_grid(a: &NormalizedCurve, b: &NormalizedCurve) -> Vec<f64> {
    let (a0, a1) = a.coverage();
    let (b0, b1) = b.coverage();
    uniform_grid_within(DEFAULT_GRID_POINTS, a0.max(b0), a1.min(b1))
}

/// Trailing mean of `|values|` over grid points within `window` of each point.
pub fn rolling_mean_abs(points: &[(f64, f64)], window: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(points.len());
    let mut lo = 0usize;
    for (i, &(t, _)) in points.iter().enumerate() {
        while points[lo].0 < t - window - 1e-12 {
            lo += 1;
        }
        let slice = &points[lo..=i];
        let m = compensated_sum(slice.iter().map(|p| p.1.abs())) / slice.len() as f64;
        out.push((t, m));
    }
    out
}

/// Signed residuals `ℓ_a − ℓ_b` on `grid` with a trailing rolling MAE.
pub fn residuals(
    a: &NormalizedCurve,
    b: &NormalizedCurve,
    grid: &[f64],
    rolling_window: f64,
) -> Result<ResidualReport> {
    if !(rolling_window > 0.0) {
        return Err(invalid_arg("rolling window must be positive"));
    }
    let la = a.resample(grid)?;
    let lb = b.resample(grid)?;
    let points: Vec<(f64, f64)> = grid.iter().zip(la.iter().zip(&lb)).map(|(&t, (x, y))| (t, x - y)).collect();
    let rolling_mae = rolling_mean_abs(&points, rolling_window);
    Ok(ResidualReport { points, rolling_mae, alerts: Vec::new(), annotations: Vec::new() })
}
