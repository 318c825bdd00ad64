//! Noisy quadratic model of AdamW viewed as an EMA of updates.
//!
//! A single quadratic mode `L = ½ h θ²` whose parameter follows
//! `θ_t = (1 − α_t) θ_{t−1} + α_t x_{t−1}` with `α_t = η(t̂) / (τ T)` and
//! zero-mean Gaussian updates `x`. Under a constant LR the continuum limit has
//! the closed form
//!
//! ```text
//! E[L(t̂)] = h σ² / (4τ) · (1 − e^{−2t̂/τ}) + h/2 · e^{−2t̂/τ} · θ(0)²
//! ```
//!
//! # Discrete noise calibration
//!
//! The continuum model uses white noise `E[x(t̂) x(s)] = σ² δ(t̂ − s)`. For an
//! EMA with constant `α` driven by i.i.d. draws of variance `v`, the stationary
//! variance is `α v / (2 − α)`. Matching it to the continuum floor `σ² / (2τ)`
//! with `α = 1 / (τ T)` gives
//!
//! ```text
//! v = σ² T (1 − α / 2)
//! ```
//!
//! which is what [`simulate`] draws (using the peak `α` when a schedule is
//! active). The transient then differs from the closed form only through
//! `(1 − α)^{2t}` versus `e^{−2αt}`, a relative error of order `α`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::{LossCurve, LossSample};
use crate::error::{invalid_arg, Error, Result};
use crate::stats::CompensatedSum;
use crate::timescale::LrSchedule;

/// Seeds per parallel work unit. Fixed so the reduction order never depends
/// on the thread count.
const SEED_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NqmConfig {
    /// Curvature `h > 0`.
    pub h: f64,
    /// Update-noise variance `σ_x²`.
    pub sigma_x2: f64,
    /// Initial parameter `θ(0)`.
    pub theta0: f64,
    /// Peak timescale `τ`.
    pub tau: f64,
    pub total_steps: u64,
    pub schedule: LrSchedule,
}

impl NqmConfig {
    pub fn constant_lr(h: f64, sigma_x2: f64, theta0: f64, tau: f64, total_steps: u64) -> Self {
        Self { h, sigma_x2, theta0, tau, total_steps, schedule: LrSchedule::constant() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(invalid_arg(format!("curvature h must be positive, got {}", self.h)));
        }
        if !(self.sigma_x2 >= 0.0) || !self.sigma_x2.is_finite() {
            return Err(invalid_arg(format!("sigma_x2 must be nonnegative, got {}", self.sigma_x2)));
        }
        if !self.theta0.is_finite() {
            return Err(invalid_arg("theta0 must be finite"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(invalid_arg(format!("tau must be positive, got {}", self.tau)));
        }
        if self.total_steps == 0 {
            return Err(invalid_arg("total_steps must be positive"));
        }
        self.schedule.validate()?;
        if self.peak_alpha() >= 1.0 {
            return Err(invalid_arg(format!(
                "EMA smoothing alpha = 1/(tau T) = {} must be below 1",
                self.peak_alpha()
            )));
        }
        Ok(())
    }

    /// `α` at peak LR, `1 / (τ T)`.
    pub fn peak_alpha(&self) -> f64 {
        1.0 / (self.tau * self.total_steps as f64)
    }

    /// `α_t` for steps `1..=T`, evaluated at `t̂ = t / T`.
    pub fn alphas(&self) -> Vec<f64> {
        let t_total = self.total_steps as f64;
        let peak = self.peak_alpha();
        (1..=self.total_steps).map(|t| self.schedule.eta_at(t as f64 / t_total) * peak).collect()
    }

    /// Per-step variance of the simulated updates; see the module docs.
    pub fn step_noise_variance(&self) -> f64 {
        self.sigma_x2 * self.total_steps as f64 * (1.0 - 0.5 * self.peak_alpha())
    }
}

/// Across-seed statistics of the simulated loss at steps `0..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NqmTrace {
    pub t_hat: Vec<f64>,
    pub mean_loss: Vec<f64>,
    /// Standard error of `mean_loss` (sample standard deviation / √seeds).
    pub std_err: Vec<f64>,
    pub seeds: usize,
}

impl NqmTrace {
    /// The mean curve as a loss log over steps `1..=T`.
    pub fn to_loss_curve(&self, run_id: impl Into<String>) -> Result<LossCurve> {
        let total = (self.t_hat.len() - 1) as u64;
        let samples = (1..self.t_hat.len()).map(|i| LossSample::new(i as u64, self.mean_loss[i])).collect();
        LossCurve::new(run_id, samples, total)
    }

    /// Loss at the step nearest to `t_hat`.
    pub fn at(&self, t_hat: f64) -> f64 {
        let total = (self.t_hat.len() - 1) as f64;
        self.mean_loss[(t_hat * total).round() as usize]
    }
}

struct ChunkAccumulator {
    sum: Vec<CompensatedSum>,
    sum_sq: Vec<CompensatedSum>,
}

/// Monte Carlo simulation over `seeds` independent trajectories.
///
/// Trajectory `i` draws its noise from a ChaCha8 stream keyed by
/// `(base_seed, i)`, so results are bit-identical for a fixed
/// `(base_seed, seeds)` regardless of thread count.
pub fn simulate(config: &NqmConfig, seeds: usize, base_seed: u64) -> Result<NqmTrace> {
    config.validate()?;
    if seeds == 0 {
        return Err(invalid_arg("seeds must be at least 1"));
    }
    let steps = config.total_steps as usize;
    let alphas = config.alphas();
    let noise_sd = config.step_noise_variance().sqrt();
    let half_h = 0.5 * config.h;
    // Sums are of deviations from the noise-free trajectory, which keeps the
    // variance estimate free of cancellation when the noise is small.
    let mut baseline = Vec::with_capacity(steps + 1);
    let mut theta_free = config.theta0;
    baseline.push(half_h * theta_free * theta_free);
    for &alpha in &alphas {
        theta_free *= 1.0 - alpha;
        baseline.push(half_h * theta_free * theta_free);
    }

    let chunks: Vec<ChunkAccumulator> = (0..seeds.div_ceil(SEED_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut acc = ChunkAccumulator {
                sum: vec![CompensatedSum::default(); steps + 1],
                sum_sq: vec![CompensatedSum::default(); steps + 1],
            };
            let lo = chunk * SEED_CHUNK;
            let hi = (lo + SEED_CHUNK).min(seeds);
            for seed in lo..hi {
                let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
                rng.set_stream(seed as u64);
                let mut theta = config.theta0;
                for (t, &alpha) in alphas.iter().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    theta = (1.0 - alpha) * theta + alpha * noise_sd * z;
                    let d = half_h * theta * theta - baseline[t + 1];
                    acc.sum[t + 1].add(d);
                    acc.sum_sq[t + 1].add(d * d);
                }
            }
            acc
        })
        .collect();

    let mut sum = vec![CompensatedSum::default(); steps + 1];
    let mut sum_sq = vec![CompensatedSum::default(); steps + 1];
    for chunk in &chunks {
        for t in 0..=steps {
            sum[t].merge(&chunk.sum[t]);
            sum_sq[t].merge(&chunk.sum_sq[t]);
        }
    }
    let n = seeds as f64;
    let mean_dev: Vec<f64> = sum.iter().map(|s| s.value() / n).collect();
    let mean_loss: Vec<f64> = baseline.iter().zip(&mean_dev).map(|(b, d)| b + d).collect();
    let std_err = sum_sq
        .iter()
        .zip(&mean_dev)
        .map(|(sq, &m)| {
            if seeds < 2 {
                return 0.0;
            }
            let var = ((sq.value() / n - m * m) * n / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        })
        .collect();
    let t_hat = (0..=steps).map(|t| t as f64 / steps as f64).collect();
    Ok(NqmTrace { t_hat, mean_loss, std_err, seeds })
}

fn require_constant(config: &NqmConfig) -> Result<()> {
    if config.schedule.is_constant() {
        Ok(())
    } else {
        Err(invalid_arg("closed form requires a constant LR schedule without warmup; use simulate"))
    }
}

/// Closed-form expected loss under a constant LR.
pub fn expected_loss(config: &NqmConfig, t_hat: f64) -> Result<f64> {
    config.validate()?;
    require_constant(config)?;
    if !(t_hat >= 0.0) {
        return Err(invalid_arg(format!("t_hat must be nonnegative, got {t_hat}")));
    }
    let decay = (-2.0 * t_hat / config.tau).exp();
    let variance = config.h * config.sigma_x2 / (4.0 * config.tau) * (1.0 - decay);
    let bias = 0.5 * config.h * decay * config.theta0 * config.theta0;
    Ok(variance + bias)
}

/// Asymptotic loss `h σ² / (4τ)` as `t̂ → ∞` with `θ(0) = 0`.
pub fn variance_floor(config: &NqmConfig) -> f64 {
    config.h * config.sigma_x2 / (4.0 * config.tau)
}

/// Bias-to-variance ratio `κ = 2τ θ(0)² / σ²`.
pub fn kappa(config: &NqmConfig) -> Result<f64> {
    if !(config.sigma_x2 > 0.0) {
        return Err(invalid_arg("kappa is undefined for zero update noise"));
    }
    Ok(2.0 * config.tau * config.theta0 * config.theta0 / config.sigma_x2)
}

/// `E[L(t̂)] / E[L(1)]` on `grid`, written in terms of `κ` so the curvature
/// cancels exactly.
pub fn normalized_expected_curve(config: &NqmConfig, grid: &[f64]) -> Result<Vec<f64>> {
    config.validate()?;
    require_constant(config)?;
    if config.sigma_x2 == 0.0 && config.theta0 == 0.0 {
        return Err(Error::Degenerate("expected loss is identically zero".into()));
    }
    let tau = config.tau;
    if config.sigma_x2 == 0.0 {
        return Ok(grid.iter().map(|&t| (2.0 * (1.0 - t) / tau).exp()).collect());
    }
    let k = kappa(config)?;
    let shape = |t: f64| {
        let e = (-2.0 * t / tau).exp();
        (1.0 - e) + k * e
    };
    let end = shape(1.0);
    Ok(grid.iter().map(|&t| shape(t) / end).collect())
}
