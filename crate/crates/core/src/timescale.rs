//! Learning-rate schedules and AdamW timescale arithmetic.
//!
//! AdamW with weight decay `λ` and learning rate `η` updates parameters as an
//! exponential moving average of updates with smoothing `α = η λ`. Measured in
//! training fraction, the EMA memory is `τ = 1 / (α T)`.

use serde::{Deserialize, Serialize};

use crate::curve::RunConfig;
use crate::error::{invalid_arg, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    LinearDecay,
}

/// Peak-normalized LR multiplier `η(t̂)` on `[0, 1]`.
///
/// Linear warmup from 0 to 1 over `[0, warmup_frac]`, then either flat
/// (`Constant`) or a straight line down to `decay_ratio` at `t̂ = 1`
/// (`LinearDecay`; `decay_ratio = 0` is decay-to-zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    #[serde(default)]
    pub warmup_frac: f64,
    #[serde(default)]
    pub decay_ratio: f64,
}

impl LrSchedule {
    pub fn constant() -> Self {
        Self { kind: ScheduleKind::Constant, warmup_frac: 0.0, decay_ratio: 1.0 }
    }

    pub fn decay_to_zero(warmup_frac: f64) -> Self {
        Self { kind: ScheduleKind::LinearDecay, warmup_frac, decay_ratio: 0.0 }
    }

    pub fn linear_decay(warmup_frac: f64, decay_ratio: f64) -> Self {
        Self { kind: ScheduleKind::LinearDecay, warmup_frac, decay_ratio }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(invalid_arg(format!("warmup_frac {} not in [0, 1)", self.warmup_frac)));
        }
        if self.kind == ScheduleKind::LinearDecay && !(0.0..=1.0).contains(&self.decay_ratio) {
            return Err(invalid_arg(format!("decay_ratio {} not in [0, 1]", self.decay_ratio)));
        }
        Ok(())
    }

    /// True when `η(t̂) = 1` on all of `[0, 1]`.
    pub fn is_constant(&self) -> bool {
        self.warmup_frac == 0.0 && (self.kind == ScheduleKind::Constant || self.decay_ratio == 1.0)
    }

    /// `η(t̂)`, exact at the breakpoints `0`, `warmup_frac` and `1`.
    pub fn eta_at(&self, t_hat: f64) -> f64 {
        let t = t_hat.clamp(0.0, 1.0);
        let w = self.warmup_frac;
        if t < w {
            return t / w;
        }
        if t == w {
            return 1.0;
        }
        match self.kind {
            ScheduleKind::Constant => 1.0,
            ScheduleKind::LinearDecay => {
                if t == 1.0 {
                    return self.decay_ratio;
                }
                let r = self.decay_ratio;
                r + (1.0 - r) * (1.0 - t) / (1.0 - w)
            }
        }
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::decay_to_zero(0.1)
    }
}

/// Free-function form of [`LrSchedule::eta_at`].
pub fn eta_at(schedule: &LrSchedule, t_hat: f64) -> f64 {
    schedule.eta_at(t_hat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimescaleSummary {
    /// Normalized timescale; `f64::INFINITY` when weight decay is zero.
    pub tau: f64,
    /// EMA smoothing `η_adj λ` at the peak LR.
    pub alpha: f64,
    pub tpp: f64,
    pub total_steps: u64,
}

/// `τ = 1 / (η_adj λ T)` computed from the peak, width-adjusted LR.
pub fn tau(config: &RunConfig) -> Result<TimescaleSummary> {
    let eta = config.adjusted_eta();
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(invalid_arg(format!("adjusted learning rate must be positive, got {eta}")));
    }
    if !(config.lambda >= 0.0) {
        return Err(invalid_arg(format!("weight decay must be nonnegative, got {}", config.lambda)));
    }
    let total_steps = config.total_steps()?;
    let alpha = eta * config.lambda;
    let tau = if config.lambda == 0.0 { f64::INFINITY } else { 1.0 / (alpha * total_steps as f64) };
    Ok(TimescaleSummary { tau, alpha, tpp: config.tpp(), total_steps })
}

/// `τ_t = 1 / (η(t̂) η_adj λ T)`; infinite wherever `η(t̂) = 0` or `λ = 0`.
pub fn instantaneous_tau(config: &RunConfig, t_hat: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t_hat) {
        return Err(invalid_arg(format!("t_hat {t_hat} not in [0, 1]")));
    }
    let base = tau(config)?;
    let eta = config.schedule.eta_at(t_hat);
    if eta == 0.0 || base.tau.is_infinite() {
        return Ok(f64::INFINITY);
    }
    Ok(base.tau / eta)
}

fn require_positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid_arg(format!("{name} must be positive and finite, got {x}")))
    }
}

/// Transfers an optimal `τ` across tokens-per-parameter with a power law
/// anchored at `(ref_tpp, ref_tau)`.
pub fn optimal_tau_for_tpp(tpp: f64, ref_tau: f64, ref_tpp: f64, exponent: f64) -> Result<f64> {
    require_positive("tpp", tpp)?;
    require_positive("ref_tau", ref_tau)?;
    require_positive("ref_tpp", ref_tpp)?;
    if !exponent.is_finite() {
        return Err(invalid_arg("exponent must be finite"));
    }
    Ok(ref_tau * (tpp / ref_tpp).powf(exponent))
}

/// Square-root batch-size rule `B_opt ∝ D^0.5` anchored at `(ref_d, ref_b)`.
pub fn optimal_batch_for_data(d: f64, ref_b: f64, ref_d: f64) -> Result<f64> {
    require_positive("D", d)?;
    require_positive("ref_B", ref_b)?;
    require_positive("ref_D", ref_d)?;
    Ok(ref_b * (d / ref_d).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::RunConfig;

    fn config(eta: f64, lambda: f64, b: u64, d: u64) -> RunConfig {
        RunConfig {
            run_id: "t".into(),
            eta,
            lr_adjust: 1.0,
            lambda,
            batch_tokens: b,
            dataset_tokens: d,
            params: 1_000_000,
            schedule: LrSchedule::decay_to_zero(0.1),
            allow_round_down: false,
        }
    }

    #[test]
    fn schedule_breakpoints() {
        let d2z = LrSchedule::decay_to_zero(0.1);
        assert_eq!(d2z.eta_at(0.0), 0.0);
        assert_eq!(d2z.eta_at(0.1), 1.0);
        assert_eq!(d2z.eta_at(1.0), 0.0);
        assert!((d2z.eta_at(0.55) - 0.5).abs() < 1e-15);
        let tenx = LrSchedule::linear_decay(0.1, 0.1);
        assert_eq!(tenx.eta_at(1.0), 0.1);
        assert_eq!(LrSchedule::constant().eta_at(0.0), 1.0);
        assert_eq!(LrSchedule::constant().eta_at(0.7), 1.0);
        let warm_const = LrSchedule { kind: ScheduleKind::Constant, warmup_frac: 0.2, decay_ratio: 1.0 };
        assert_eq!(warm_const.eta_at(0.1), 0.5);
        assert!(!warm_const.is_constant());
        assert!(LrSchedule::linear_decay(0.0, 1.0).is_constant());
    }

    #[test]
    fn schedule_is_continuous_and_bounded() {
        for s in [LrSchedule::decay_to_zero(0.1), LrSchedule::linear_decay(0.25, 0.1), LrSchedule::constant()] {
            let mut prev = s.eta_at(0.0);
            for i in 1..=10_000 {
                let e = s.eta_at(i as f64 / 10_000.0);
                assert!((0.0..=1.0).contains(&e));
                assert!((e - prev).abs() <= 1.0 / 10_000.0 / 0.1 + 1e-12);
                prev = e;
            }
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::linear_decay(1.0, 0.0).validate().is_err());
        assert!(LrSchedule::linear_decay(0.1, 1.5).validate().is_err());
        assert!(LrSchedule::decay_to_zero(0.0).validate().is_ok());
    }

    #[test]
    fn tau_direct_formula() {
        let s = tau(&config(0.01, 0.1, 1_000_000, 1_000_000_000)).unwrap();
        assert_eq!(s.total_steps, 1000);
        assert!((s.tau - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tau_zero_weight_decay_is_infinite() {
        let s = tau(&config(0.01, 0.0, 1_000_000, 1_000_000_000)).unwrap();
        assert!(s.tau.is_infinite());
        assert!(instantaneous_tau(&config(0.01, 0.0, 1_000_000, 1_000_000_000), 0.5).unwrap().is_infinite());
    }

    #[test]
    fn tau_with_width_adjustment_matches_hand_arithmetic() {
        let mut c = config(0.15, 0.05, 2048 * 1024, 2048 * 1024 * 5000);
        c.lr_adjust = 256.0 / 2048.0;
        let s = tau(&c).unwrap();
        // 0.15 * 0.125 = 0.01875; * 0.05 = 9.375e-4; * 5000 = 4.6875
        assert!((s.tau - 1.0 / 4.6875).abs() < 1e-12);
    }

    #[test]
    fn tau_rejects_nonpositive_eta() {
        assert!(tau(&config(0.0, 0.1, 10, 100)).is_err());
        assert!(tau(&config(-1.0, 0.1, 10, 100)).is_err());
    }

    #[test]
    fn instantaneous_tau_cases() {
        let mut c = config(0.01, 0.1, 1_000_000, 1_000_000_000);
        let base = tau(&c).unwrap().tau;
        assert!((instantaneous_tau(&c, 0.55).unwrap() - 2.0 * base).abs() < 1e-12);
        assert!(instantaneous_tau(&c, 1.0).unwrap().is_infinite());
        c.schedule = LrSchedule::constant();
        for t in [0.2, 0.5, 0.9, 1.0] {
            assert_eq!(instantaneous_tau(&c, t).unwrap(), base);
        }
    }

    #[test]
    fn instantaneous_tau_monotone_under_d2z() {
        let c = config(0.01, 0.1, 1_000_000, 1_000_000_000);
        let mut prev = 0.0;
        for i in 0..=1000 {
            let t = 0.1 + 0.9 * i as f64 / 1000.0;
            let v = instantaneous_tau(&c, t).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn instantaneous_tau_times_eta_is_constant() {
        let c = config(0.02, 0.05, 1_000_000, 2_000_000_000);
        let base = tau(&c).unwrap().tau;
        for i in 1..99 {
            let t = 0.1 + 0.9 * i as f64 / 100.0;
            let prod = instantaneous_tau(&c, t).unwrap() * c.schedule.eta_at(t);
            assert!((prod / base - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tau_tpp_power_law() {
        assert_eq!(optimal_tau_for_tpp(20.0, 0.3, 20.0, -0.5).unwrap(), 0.3);
        assert_eq!(optimal_tau_for_tpp(500.0, 0.3, 20.0, 0.0).unwrap(), 0.3);
        assert!((optimal_tau_for_tpp(80.0, 0.3, 20.0, -0.5).unwrap() - 0.15).abs() < 1e-15);
        assert!(optimal_tau_for_tpp(0.0, 0.3, 20.0, -0.5).is_err());
    }

    #[test]
    fn batch_square_root_rule() {
        assert_eq!(optimal_batch_for_data(5.4e9, 176.0, 5.4e9).unwrap(), 176.0);
        assert_eq!(optimal_batch_for_data(4.0 * 5.4e9, 176.0, 5.4e9).unwrap(), 352.0);
        let b = optimal_batch_for_data(21.7e9, 176.0, 5.4e9).unwrap();
        // 176 * sqrt(21.7 / 5.4) = 176 * 2.00463... = 352.81
        assert!((b - 176.0 * (21.7f64 / 5.4).sqrt()).abs() < 1e-9);
        assert!((b - 352.8).abs() < 0.1);
        assert!(optimal_batch_for_data(-1.0, 176.0, 5.4e9).is_err());
    }
}
