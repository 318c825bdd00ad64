//! Choosing a sweep winner from partial runs, and scoring stopping strategies
//! by the final-loss gap to the true best run.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::LossCurve;
use crate::error::{invalid_arg, Error, Result};
use crate::predictor::{predict_curve, CurveMeta, PredictorParams};
use crate::stats::{compensated_sum, l1_normalizer};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub run_id: String,
    pub partial: LossCurve,
    pub meta: CurveMeta,
    pub true_final: Option<f64>,
}

impl SweepEntry {
    pub fn new(partial: LossCurve, meta: CurveMeta) -> Self {
        Self { run_id: partial.run_id().to_string(), partial, meta, true_final: None }
    }

    pub fn with_true_final(mut self, value: f64) -> Self {
        self.true_final = Some(value);
        self
    }

    pub fn stop_fraction(&self) -> f64 {
        self.partial.last_t_hat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    CurrentBest,
    PredictedBest,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::CurrentBest, Strategy::PredictedBest];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::CurrentBest => "current_best",
            Strategy::PredictedBest => "predicted_best",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| invalid_arg(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopDecision {
    pub chosen_run_id: String,
    /// Filled only when the predicted-best strategy actually ran.
    pub predicted_finals: BTreeMap<String, f64>,
    pub strategy: Strategy,
    pub stop_fraction: f64,
    /// Predicted-best was requested before `min_stop` and current-best was used.
    pub fell_back: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopOptions {
    /// Lower edge of the inference window.
    pub window_lo: f64,
    /// Smallest stop fraction at which final-loss inference is attempted.
    pub min_stop: f64,
    /// Trailing smoothing window (steps) for current-best.
    pub smooth_steps: u64,
    /// Allowed spread of stop fractions within one sweep.
    pub stop_tolerance: f64,
}

impl Default for EarlyStopOptions {
    fn default() -> Self {
        Self { window_lo: 0.2, min_stop: 0.25, smooth_steps: 100, stop_tolerance: 0.01 }
    }
}

impl EarlyStopOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.window_lo && self.window_lo < self.min_stop && self.min_stop <= 1.0) {
            return Err(invalid_arg("need 0 <= window_lo < min_stop <= 1"));
        }
        if self.smooth_steps == 0 || !(self.stop_tolerance >= 0.0) {
            return Err(invalid_arg("smooth_steps must be positive and stop_tolerance non-negative"));
        }
        Ok(())
    }
}

pub fn infer_final_loss(entry: &SweepEntry, params: &PredictorParams) -> Result<f64> {
    infer_final_loss_with(entry, params, &EarlyStopOptions::default())
}

/// The `L_T` minimizing the mean absolute difference between `partial / L_T`
/// and the prediction over `[window_lo, stop]`.
pub fn infer_final_loss_with(entry: &SweepEntry, params: &PredictorParams, opts: &EarlyStopOptions) -> Result<f64> {
    opts.validate()?;
    let partial = &entry.partial;
    if partial.is_empty() {
        return Err(Error::EmptyInput);
    }
    let stop = partial.last_t_hat();
    if stop < opts.min_stop || partial.first_t_hat() > opts.window_lo {
        return Err(Error::Coverage(format!(
            "run {} covers [{}, {stop}], inference needs [{}, s] with s >= {}",
            entry.run_id,
            partial.first_t_hat(),
            opts.window_lo,
            opts.min_stop
        )));
    }
    let (ts, observed): (Vec<f64>, Vec<f64>) =
        partial.training_fraction().into_iter().filter(|(t, _)| *t >= opts.window_lo).unzip();
    let target = predict_curve(params, &entry.meta, &ts)?;
    l1_normalizer(&observed, &target)
}

fn common_stop(sweep: &[SweepEntry], tolerance: f64) -> Result<f64> {
    let stops: Vec<f64> = sweep.iter().map(SweepEntry::stop_fraction).collect();
    let lo = stops.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = stops.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > tolerance {
        return Err(invalid_arg(format!("sweep stop fractions span [{lo}, {hi}], beyond tolerance {tolerance}")));
    }
    Ok(hi)
}

/// Index of the smallest value; ties go to the earliest entry.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

pub fn decide(
    sweep: &[SweepEntry],
    strategy: Strategy,
    params: &PredictorParams,
    rng_seed: u64,
) -> Result<StopDecision> {
    decide_with(sweep, strategy, params, rng_seed, &EarlyStopOptions::default())
}

pub fn decide_with(
    sweep: &[SweepEntry],
    strategy: Strategy,
    params: &PredictorParams,
    rng_seed: u64,
    opts: &EarlyStopOptions,
) -> Result<StopDecision> {
    opts.validate()?;
    if sweep.is_empty() {
        return Err(Error::EmptyInput);
    }
    if sweep.iter().any(|e| e.partial.is_empty()) {
        return Err(Error::EmptyInput);
    }
    let stop_fraction = common_stop(sweep, opts.stop_tolerance)?;
    let mut decision = StopDecision {
        chosen_run_id: String::new(),
        predicted_finals: BTreeMap::new(),
        strategy,
        stop_fraction,
        fell_back: false,
    };
    let chosen = match strategy {
        Strategy::Random => ChaCha8Rng::seed_from_u64(rng_seed).random_range(0..sweep.len()),
        Strategy::PredictedBest if stop_fraction < opts.min_stop => {
            log::warn!("stop fraction {stop_fraction} is below {}; using current best", opts.min_stop);
            decision.fell_back = true;
            current_best_index(sweep, opts)?
        }
        Strategy::CurrentBest => current_best_index(sweep, opts)?,
        Strategy::PredictedBest => {
            let finals: Vec<f64> =
                sweep.par_iter().map(|e| infer_final_loss_with(e, params, opts)).collect::<Result<Vec<_>>>()?;
            for (e, &v) in sweep.iter().zip(&finals) {
                decision.predicted_finals.insert(e.run_id.clone(), v);
            }
            argmin(&finals)
        }
    };
    decision.chosen_run_id = sweep[chosen].run_id.clone();
    Ok(decision)
}

fn current_best_index(sweep: &[SweepEntry], opts: &EarlyStopOptions) -> Result<usize> {
    let last: Vec<f64> = sweep
        .iter()
        .map(|e| e.partial.smooth(opts.smooth_steps).map(|c| c.final_loss()))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmin(&last))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub stop_fraction: f64,
    pub strategy: Strategy,
    pub gap: f64,
}

/// Final-loss regret of `strategy` at each stop fraction. Entries hold curves
/// that extend at least to the largest stop fraction; each is truncated per
/// stop. Random averages over `seeds`.
pub fn evaluate_strategy(
    sweep: &[SweepEntry],
    strategy: Strategy,
    stop_fractions: &[f64],
    params: &PredictorParams,
    seeds: &[u64],
) -> Result<Vec<GapPoint>> {
    evaluate_strategy_with(sweep, strategy, stop_fractions, params, seeds, &EarlyStopOptions::default())
}

pub fn evaluate_strategy_with(
    sweep: &[SweepEntry],
    strategy: Strategy,
    stop_fractions: &[f64],
    params: &PredictorParams,
    seeds: &[u64],
    opts: &EarlyStopOptions,
) -> Result<Vec<GapPoint>> {
    if sweep.is_empty() {
        return Err(Error::EmptyInput);
    }
    let finals: BTreeMap<&str, f64> = sweep
        .iter()
        .map(|e| {
            e.true_final
                .map(|v| (e.run_id.as_str(), v))
                .ok_or_else(|| invalid_arg(format!("run {} has no true final loss", e.run_id)))
        })
        .collect::<Result<_>>()?;
    let best = finals.values().copied().fold(f64::INFINITY, f64::min);
    if strategy == Strategy::Random && seeds.is_empty() {
        return Err(invalid_arg("random strategy needs at least one seed"));
    }

    let mut out = Vec::with_capacity(stop_fractions.len());
    for &stop in stop_fractions {
        let truncated: Vec<SweepEntry> = sweep
            .iter()
            .map(|e| Ok(SweepEntry { partial: e.partial.truncate_at(stop)?, ..e.clone() }))
            .collect::<Result<_>>()?;
        let gap = if strategy == Strategy::Random {
            let gaps: Vec<f64> = seeds
                .iter()
                .map(|&s| {
                    decide_with(&truncated, strategy, params, s, opts).map(|d| finals[d.chosen_run_id.as_str()] - best)
                })
                .collect::<Result<_>>()?;
            compensated_sum(gaps.iter().copied()) / gaps.len() as f64
        } else {
            let d = decide_with(&truncated, strategy, params, 0, opts)?;
            finals[d.chosen_run_id.as_str()] - best
        };
        out.push(GapPoint { stop_fraction: stop, strategy, gap });
    }
    Ok(out)
}

/// Expected gap of a uniform random pick.
pub fn expected_random_gap(finals: &[f64]) -> Result<f64> {
    if finals.is_empty() {
        return Err(Error::EmptyInput);
    }
    let best = finals.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(compensated_sum(finals.iter().map(|f| f - best)) / finals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::LossSample;
    use crate::predictor::predict;
    use crate::timescale::LrSchedule;
    use rand_distr::{Distribution, Normal};

    const T: u64 = 2000;

    fn run(id: &str, meta: &CurveMeta, final_loss: f64, params: &PredictorParams) -> LossCurve {
        let samples = (1..=T)
            .map(|s| LossSample::new(s, final_loss * predict(params, meta, s as f64 / T as f64).unwrap()))
            .collect();
        LossCurve::new(id, samples, T).unwrap()
    }

    fn entry(id: &str, tau: f64, final_loss: f64) -> SweepEntry {
        let p = PredictorParams::default();
        let meta = CurveMeta::new(tau, 20.0, LrSchedule::decay_to_zero(0.0));
        SweepEntry::new(run(id, &meta, final_loss, &p), meta).with_true_final(final_loss)
    }

    fn crossing() -> Vec<SweepEntry> {
        vec![entry("x", 1.0, 2.30), entry("y", 0.3, 2.25)]
    }

    #[test]
    fn exact_model_fixed_point() {
        let e = entry("a", 0.5, 2.3);
        let partial = SweepEntry { partial: e.partial.truncate_at(0.5).unwrap(), ..e };
        let lt = infer_final_loss(&partial, &PredictorParams::default()).unwrap();
        assert!((lt / 2.3 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn noisy_recovery() {
        let e = entry("a", 0.5, 2.3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 0.003).unwrap();
        let noisy: Vec<f64> = e.partial.losses().iter().map(|l| l * (1.0 + noise.sample(&mut rng))).collect();
        let partial = e.partial.with_losses(&noisy).unwrap().truncate_at(0.5).unwrap();
        let lt = infer_final_loss(&SweepEntry { partial, ..e }, &PredictorParams::default()).unwrap();
        assert!((lt / 2.3 - 1.0).abs() < 0.01);
    }

    #[test]
    fn too_early_stop_is_coverage_error() {
        let e = entry("a", 0.5, 2.3);
        let partial = SweepEntry { partial: e.partial.truncate_at(0.15).unwrap(), ..e };
        assert!(matches!(infer_final_loss(&partial, &PredictorParams::default()), Err(Error::Coverage(_))));
    }

    #[test]
    fn inference_scales_with_losses() {
        let e = entry("a", 0.5, 2.3);
        let p = PredictorParams::default();
        let partial = e.partial.truncate_at(0.4).unwrap();
        let base = infer_final_loss(&SweepEntry { partial: partial.clone(), ..e.clone() }, &p).unwrap();
        let scaled = partial.with_losses(&partial.losses().iter().map(|l| 4.0 * l).collect::<Vec<_>>()).unwrap();
        let lt = infer_final_loss(&SweepEntry { partial: scaled, ..e }, &p).unwrap();
        assert_eq!(lt, 4.0 * base);
    }

    #[test]
    fn crossing_pair_fools_current_best() {
        let sweep: Vec<SweepEntry> =
            crossing().into_iter().map(|e| SweepEntry { partial: e.partial.truncate_at(0.5).unwrap(), ..e }).collect();
        let p = PredictorParams::default();
        assert_eq!(decide(&sweep, Strategy::CurrentBest, &p, 0).unwrap().chosen_run_id, "x");
        let d = decide(&sweep, Strategy::PredictedBest, &p, 0).unwrap();
        assert_eq!(d.chosen_run_id, "y");
        assert_eq!(d.predicted_finals.len(), 2);
    }

    #[test]
    fn crossing_gaps() {
        let p = PredictorParams::default();
        let stops = [0.3, 0.5, 0.7];
        let pred = evaluate_strategy(&crossing(), Strategy::PredictedBest, &stops, &p, &[]).unwrap();
        assert!(pred.iter().all(|g| g.gap == 0.0));
        let cur = evaluate_strategy(&crossing(), Strategy::CurrentBest, &stops, &p, &[]).unwrap();
        assert!(cur[1].gap > 0.0);
    }

    #[test]
    fn non_crossing_agree() {
        let sweep = vec![entry("a", 0.3, 2.4), entry("b", 0.3, 2.2), entry("c", 0.3, 2.3)];
        let p = PredictorParams::default();
        for stop in [0.25, 0.4, 0.6, 1.0] {
            for s in [Strategy::CurrentBest, Strategy::PredictedBest] {
                let g = evaluate_strategy(&sweep, s, &[stop], &p, &[]).unwrap();
                assert_eq!(g[0].gap, 0.0, "{s} at {stop}");
            }
        }
    }

    #[test]
    fn predicted_best_falls_back_early() {
        let sweep: Vec<SweepEntry> =
            crossing().into_iter().map(|e| SweepEntry { partial: e.partial.truncate_at(0.2).unwrap(), ..e }).collect();
        let d = decide(&sweep, Strategy::PredictedBest, &PredictorParams::default(), 0).unwrap();
        assert!(d.fell_back && d.predicted_finals.is_empty());
    }

    #[test]
    fn random_is_reproducible_and_unbiased() {
        let finals = [2.0, 2.1, 2.2, 2.3];
        assert!((expected_random_gap(&finals).unwrap() - 0.15).abs() < 1e-12);
        let sweep: Vec<SweepEntry> = finals.iter().enumerate().map(|(i, &f)| entry(&format!("r{i}"), 0.3, f)).collect();
        let p = PredictorParams::default();
        let a = decide(&sweep, Strategy::Random, &p, 42).unwrap();
        let b = decide(&sweep, Strategy::Random, &p, 42).unwrap();
        assert_eq!(a, b);
        let seeds: Vec<u64> = (0..4000).collect();
        let g = evaluate_strategy(&sweep, Strategy::Random, &[0.5], &p, &seeds).unwrap();
        assert!((g[0].gap - 0.15).abs() < 0.01, "{}", g[0].gap);
    }

    #[test]
    fn mismatched_stops_and_missing_finals() {
        let mut sweep = crossing();
        sweep[0].partial = sweep[0].partial.truncate_at(0.5).unwrap();
        assert!(decide(&sweep, Strategy::CurrentBest, &PredictorParams::default(), 0).is_err());
        let mut sweep = crossing();
        sweep[1].true_final = None;
        assert!(evaluate_strategy(&sweep, Strategy::CurrentBest, &[0.5], &PredictorParams::default(), &[]).is_err());
        assert!(matches!(decide(&[], Strategy::Random, &PredictorParams::default(), 0), Err(Error::EmptyInput)));
    }
}
