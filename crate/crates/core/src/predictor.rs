//! Parametric normalized loss-curve model:
//! `raw(t̂) = ((1+ε₁)/(t̂+ε₁))^m + b·(η(t̂)+ε₂)^q`, reported as `raw(t̂)/raw(1)`,
//! with `b = b_const·τ^b_exp` and `q = q_const·TPP^q_exp`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::normalize::NormalizedCurve;
use crate::stats::{compensated_sum, linspace, logspace};
use crate::timescale::LrSchedule;

/// Lower edge of the evaluation window; earlier points are dominated by warmup.
pub const EVAL_START: f64 = 0.2;
pub const EVAL_POINTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub m: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub b_const: f64,
    pub b_exp: f64,
    pub q_const: f64,
    pub q_exp: f64,
}

impl Default for PredictorParams {
    fn default() -> Self {
        Self { m: 0.05, eps1: 0.001, eps2: 0.1, b_const: 0.8, b_exp: -0.6, q_const: 2.0, q_exp: -0.25 }
    }
}

impl PredictorParams {
    pub fn b(&self, tau: f64) -> f64 {
        self.b_const * tau.powf(self.b_exp)
    }

    pub fn q(&self, tpp: f64) -> f64 {
        self.q_const * tpp.powf(self.q_exp)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("m", self.m), ("eps1", self.eps1), ("eps2", self.eps2)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid_arg(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in
            [("b_const", self.b_const), ("b_exp", self.b_exp), ("q_const", self.q_const), ("q_exp", self.q_exp)]
        {
            if !v.is_finite() {
                return Err(invalid_arg(format!("{name} must be finite, got {v}")));
            }
        }
        Ok(())
    }

    /// Checks that `b ≥ 0` and `q > 0` are finite for `meta`.
    pub fn validate_for(&self, meta: &CurveMeta) -> Result<()> {
        self.validate()?;
        meta.validate()?;
        let (b, q) = (self.b(meta.tau), self.q(meta.tpp));
        if !(b >= 0.0) || !b.is_finite() {
            return Err(invalid_arg(format!("b(τ={}) = {b} must be finite and non-negative", meta.tau)));
        }
        if !(q > 0.0) || !q.is_finite() {
            return Err(invalid_arg(format!("q(TPP={}) = {q} must be finite and positive", meta.tpp)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveMeta {
    pub tau: f64,
    pub tpp: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
}

impl CurveMeta {
    pub fn new(tau: f64, tpp: f64, schedule: LrSchedule) -> Self {
        Self { tau, tpp, schedule }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(invalid_arg(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.tpp > 0.0) || !self.tpp.is_finite() {
            return Err(invalid_arg(format!("tpp must be positive, got {}", self.tpp)));
        }
        self.schedule.validate()
    }
}

/// The curve shape for explicit `(b, q)`.
#[derive(Debug, Clone, Copy)]
struct Shape {
    m: f64,
    eps1: f64,
    eps2: f64,
    b: f64,
    q: f64,
}

impl Shape {
    fn power(&self, t: f64) -> f64 {
        ((1.0 + self.eps1) / (t + self.eps1)).powf(self.m)
    }

    fn schedule_term(&self, eta: f64) -> f64 {
        (eta + self.eps2).powf(self.q)
    }

    fn raw(&self, schedule: &LrSchedule, t: f64) -> f64 {
        self.power(t) + self.b * self.schedule_term(schedule.eta_at(t))
    }

    fn eval(&self, schedule: &LrSchedule, t: f64) -> f64 {
        if t == 1.0 {
            return 1.0;
        }
        self.raw(schedule, t) / self.raw(schedule, 1.0)
    }
}

fn shape(params: &PredictorParams, b: f64, q: f64) -> Shape {
    Shape { m: params.m, eps1: params.eps1, eps2: params.eps2, b, q }
}

/// `ℓ̂(t̂)` for `t̂ ∈ [0, 1]`; `ℓ̂(1) = 1`.
pub fn predict(params: &PredictorParams, meta: &CurveMeta, t_hat: f64) -> Result<f64> {
    params.validate_for(meta)?;
    check_t(t_hat)?;
    Ok(shape(params, params.b(meta.tau), params.q(meta.tpp)).eval(&meta.schedule, t_hat))
}

pub fn predict_curve(params: &PredictorParams, meta: &CurveMeta, grid: &[f64]) -> Result<Vec<f64>> {
    params.validate_for(meta)?;
    let s = shape(params, params.b(meta.tau), params.q(meta.tpp));
    grid.iter().map(|&t| check_t(t).map(|_| s.eval(&meta.schedule, t))).collect()
}

/// `ℓ̂` with explicit `(b, q)` in place of the power laws.
pub fn predict_with_bq(params: &PredictorParams, schedule: &LrSchedule, b: f64, q: f64, t_hat: f64) -> Result<f64> {
    params.validate()?;
    check_t(t_hat)?;
    if !(b >= 0.0) || !(q > 0.0) {
        return Err(invalid_arg(format!("need b >= 0 and q > 0, got b={b}, q={q}")));
    }
    Ok(shape(params, b, q).eval(schedule, t_hat))
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid_arg(format!("training fraction {t} outside [0, 1]")));
    }
    Ok(())
}

pub fn eval_grid() -> Vec<f64> {
    linspace(EVAL_START, 1.0, EVAL_POINTS)
}

fn observed_on_eval_grid(curve: &NormalizedCurve) -> Result<Vec<f64>> {
    if !curve.covers(EVAL_START, 1.0) {
        let (a, b) = curve.coverage();
        return Err(Error::Coverage(format!("curve covers [{a}, {b}], MAE needs [{EVAL_START}, 1]")));
    }
    curve.resample(&eval_grid())
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    compensated_sum(a.iter().zip(b).map(|(x, y)| (x - y).abs())) / a.len() as f64
}

/// Mean absolute error on 256 uniform points of `[0.2, 1]`.
pub fn mae(params: &PredictorParams, curve: &NormalizedCurve, meta: &CurveMeta) -> Result<f64> {
    let observed = observed_on_eval_grid(curve)?;
    let predicted = predict_curve(params, meta, &eval_grid())?;
    Ok(mean_abs_diff(&predicted, &observed))
}

/// Unweighted mean of per-curve MAE.
pub fn macro_mae(params: &PredictorParams, corpus: &[(NormalizedCurve, CurveMeta)]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput);
    }
    let per: Vec<f64> = corpus.par_iter().map(|(c, m)| mae(params, c, m)).collect::<Result<Vec<_>>>()?;
    Ok(compensated_sum(per.iter().copied()) / per.len() as f64)
}

/// Search grids for the alternating fit and the per-curve oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitGrid {
    /// Candidates for `b` and `b_const`; may include 0.
    pub b_values: Vec<f64>,
    /// Candidates for `q` and `q_const`; all positive.
    pub q_values: Vec<f64>,
    pub exp_values: Vec<f64>,
    /// Local refinement levels run after each exhaustive pass.
    pub zoom_levels: usize,
    pub zoom_points: usize,
}

impl Default for FitGrid {
    fn default() -> Self {
        let mut b_values = vec![0.0];
        b_values.extend(logspace(0.01, 5.0, 65));
        Self {
            b_values,
            q_values: logspace(0.05, 10.0, 64),
            exp_values: linspace(-2.0, 2.0, 41),
            zoom_levels: 10,
            zoom_points: 9,
        }
    }
}

impl FitGrid {
    /// Same ranges as the default with `g` points per axis.
    pub fn with_resolution(g: usize) -> Result<Self> {
        if g < 2 {
            return Err(invalid_arg("grid resolution must be at least 2"));
        }
        let mut b_values = vec![0.0];
        b_values.extend(logspace(0.01, 5.0, g));
        Ok(Self { b_values, q_values: logspace(0.05, 10.0, g), exp_values: linspace(-2.0, 2.0, g), ..Self::default() })
    }

    fn validate(&self) -> Result<()> {
        let sorted = |v: &[f64]| !v.is_empty() && v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.b_values) || !sorted(&self.q_values) || !sorted(&self.exp_values) {
            return Err(invalid_arg("fit grids must be nonempty and strictly increasing"));
        }
        if self.b_values[0] < 0.0 || self.q_values[0] <= 0.0 {
            return Err(invalid_arg("b grid must be non-negative and q grid positive"));
        }
        if self.zoom_levels > 0 && self.zoom_points < 3 {
            return Err(invalid_arg("zoom_points must be at least 3"));
        }
        Ok(())
    }
}

/// Log-spacing of the positive part of a grid, used as the initial zoom span.
fn log_step(values: &[f64]) -> f64 {
    let pos: Vec<f64> = values.iter().copied().filter(|v| *v > 0.0).collect();
    if pos.len() < 2 {
        return 0.0;
    }
    (pos[pos.len() - 1] / pos[0]).ln() / (pos.len() - 1) as f64
}

fn lin_step(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    (values[values.len() - 1] - values[0]) / (values.len() - 1) as f64
}

/// Exhaustive argmin over `xs × ys` followed by zoomed local passes around the
/// best point. Ties go to the lexicographically smallest `(x, y)`. Every pass
/// contains the current best, so the result is never worse than `incumbent`.
fn grid_argmin(
    xs: &[f64],
    ys: &[f64],
    x_log: bool,
    y_log: bool,
    zoom: (usize, usize),
    incumbent: Option<(f64, f64)>,
    f: &(dyn Fn(f64, f64) -> f64 + Sync),
) -> (f64, f64, f64) {
    let mut candidates: Vec<(f64, f64)> = xs.iter().flat_map(|&x| ys.iter().map(move |&y| (x, y))).collect();
    candidates.extend(incumbent);
    let mut best = (f64::INFINITY, xs[0], ys[0]);
    scan(&candidates, f, &mut best);

    let (levels, points) = zoom;
    let (mut hx, mut hy) =
        (if x_log { log_step(xs) } else { lin_step(xs) }, if y_log { log_step(ys) } else { lin_step(ys) });
    for _ in 0..levels {
        let (bx, by) = (best.1, best.2);
        let axis = |center: f64, half: f64, log: bool| -> Vec<f64> {
            if half == 0.0 || (log && center <= 0.0) {
                return vec![center];
            }
            linspace(-half, half, points)
                .into_iter()
                .map(|d| if log { center * d.exp() } else { center + d })
                .map(|v| if (v - center).abs() <= 1e-15 * center.abs() { center } else { v })
                .collect()
        };
        let zx = axis(bx, hx, x_log);
        let zy = axis(by, hy, y_log);
        let local: Vec<(f64, f64)> = zx.iter().flat_map(|&x| zy.iter().map(move |&y| (x, y))).collect();
        scan(&local, f, &mut best);
        hx *= 2.0 / (points - 1) as f64;
        hy *= 2.0 / (points - 1) as f64;
    }
    (best.1, best.2, best.0)
}

fn scan(candidates: &[(f64, f64)], f: &(dyn Fn(f64, f64) -> f64 + Sync), best: &mut (f64, f64, f64)) {
    let values: Vec<f64> = candidates.par_iter().map(|&(x, y)| f(x, y)).collect();
    for (&(x, y), &v) in candidates.iter().zip(&values) {
        if !v.is_finite() {
            continue;
        }
        if v < best.0 || (v == best.0 && (x, y) < (best.1, best.2)) {
            *best = (v, x, y);
        }
    }
}

/// Per-curve values on the evaluation grid that do not depend on `b`.
struct Prepared {
    observed: Vec<f64>,
    power: Vec<f64>,
    eta: Vec<f64>,
    eta_end: f64,
    meta: CurveMeta,
}

impl Prepared {
    fn new(params: &PredictorParams, curve: &NormalizedCurve, meta: &CurveMeta) -> Result<Self> {
        meta.validate()?;
        let grid = eval_grid();
        let s = shape(params, 0.0, 1.0);
        Ok(Self {
            observed: observed_on_eval_grid(curve)?,
            power: grid.iter().map(|&t| s.power(t)).collect(),
            eta: grid.iter().map(|&t| meta.schedule.eta_at(t)).collect(),
            eta_end: meta.schedule.eta_at(1.0),
            meta: meta.clone(),
        })
    }

    fn schedule_terms(&self, eps2: f64, q: f64) -> (Vec<f64>, f64) {
        (self.eta.iter().map(|e| (e + eps2).powf(q)).collect(), (self.eta_end + eps2).powf(q))
    }
}

fn mae_linear_in_b(prep: &Prepared, terms: &(Vec<f64>, f64), b: f64) -> f64 {
    let (s, s1) = terms;
    let denom = 1.0 + b * s1;
    let last = prep.observed.len() - 1;
    let mut acc = crate::stats::CompensatedSum::default();
    for (j, ((p, sj), o)) in prep.power.iter().zip(s).zip(&prep.observed).enumerate() {
        let pred = if j == last { 1.0 } else { (p + b * sj) / denom };
        acc.add((pred - o).abs());
    }
    acc.value() / prep.observed.len() as f64
}

fn corpus_objective(prepared: &[Prepared], params: &PredictorParams) -> f64 {
    let mut acc = crate::stats::CompensatedSum::default();
    for p in prepared {
        let (b, q) = (params.b(p.meta.tau), params.q(p.meta.tpp));
        if !(b >= 0.0) || !b.is_finite() || !(q > 0.0) || !q.is_finite() {
            return f64::INFINITY;
        }
        acc.add(mae_linear_in_b(p, &p.schedule_terms(params.eps2, q), b));
    }
    acc.value() / prepared.len() as f64
}

/// Extrapolates along the change made by the last round, in
/// `(ln b_const, b_exp, ln q_const, q_exp)`, doubling the step while the
/// objective keeps falling. Returns the move only if it improves on `current`.
fn pattern_move(
    prepared: &[Prepared],
    from: &PredictorParams,
    to: &PredictorParams,
    current: f64,
) -> Option<(PredictorParams, f64)> {
    const MAX_DOUBLINGS: usize = 10;
    if from.b_const <= 0.0 || to.b_const <= 0.0 {
        return None;
    }
    let d = [
        (to.b_const / from.b_const).ln(),
        to.b_exp - from.b_exp,
        (to.q_const / from.q_const).ln(),
        to.q_exp - from.q_exp,
    ];
    if d.iter().all(|x| *x == 0.0) {
        return None;
    }
    let at = |k: f64| PredictorParams {
        b_const: to.b_const * (k * d[0]).exp(),
        b_exp: to.b_exp + k * d[1],
        q_const: to.q_const * (k * d[2]).exp(),
        q_exp: to.q_exp + k * d[3],
        ..*to
    };
    let mut best: Option<(PredictorParams, f64)> = None;
    let mut k = 1.0;
    for _ in 0..MAX_DOUBLINGS {
        let candidate = at(k);
        let value = corpus_objective(prepared, &candidate);
        if value < best.map_or(current, |b| b.1) {
            best = Some((candidate, value));
            k *= 2.0;
        } else {
            break;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub params: PredictorParams,
    pub macro_mae: f64,
    /// Objective after each half-step and each accepted pattern move.
    pub history: Vec<f64>,
    pub rounds: usize,
}

/// Alternates between fitting `(b_const, b_exp)` with `q` fixed and
/// `(q_const, q_exp)` with `b` fixed. `m`, `ε₁`, `ε₂` are taken from `init`;
/// the `q` half of `init` seeds the first round. From the second round on, a
/// round ends with a pattern move along the direction of the previous round,
/// kept only if it lowers the objective. Stops when a full round improves the
/// macro MAE by less than `1e-6` or after `max_rounds`.
pub fn fit_alternating(
    corpus: &[(NormalizedCurve, CurveMeta)],
    init: &PredictorParams,
    grid: &FitGrid,
    max_rounds: usize,
) -> Result<FitReport> {
    const TOL: f64 = 1e-6;
    if corpus.is_empty() {
        return Err(Error::EmptyInput);
    }
    if max_rounds == 0 {
        return Err(invalid_arg("max_rounds must be positive"));
    }
    init.validate()?;
    grid.validate()?;
    let prepared: Vec<Prepared> = corpus.iter().map(|(c, m)| Prepared::new(init, c, m)).collect::<Result<Vec<_>>>()?;
    let n = prepared.len() as f64;
    let zoom = (grid.zoom_levels, grid.zoom_points);
    let mut params = *init;
    let mut history = Vec::new();
    let mut previous = f64::INFINITY;
    let mut rounds = 0;
    let mut round_start: Option<PredictorParams> = None;

    while rounds < max_rounds {
        rounds += 1;

        let terms: Vec<(Vec<f64>, f64)> =
            prepared.iter().map(|p| p.schedule_terms(params.eps2, params.q(p.meta.tpp))).collect();
        let objective_b = |bc: f64, be: f64| -> f64 {
            let mut acc = crate::stats::CompensatedSum::default();
            for (p, t) in prepared.iter().zip(&terms) {
                let b = if bc == 0.0 { 0.0 } else { bc * p.meta.tau.powf(be) };
                if !b.is_finite() {
                    return f64::INFINITY;
                }
                acc.add(mae_linear_in_b(p, t, b));
            }
            acc.value() / n
        };
        let start = (rounds > 1).then_some((params.b_const, params.b_exp));
        let (bc, be, after_b) = grid_argmin(&grid.b_values, &grid.exp_values, true, false, zoom, start, &objective_b);
        params.b_const = bc;
        params.b_exp = be;
        history.push(after_b);

        let bs: Vec<f64> = prepared.iter().map(|p| params.b(p.meta.tau)).collect();
        let objective_q = |qc: f64, qe: f64| -> f64 {
            let mut acc = crate::stats::CompensatedSum::default();
            for (p, &b) in prepared.iter().zip(&bs) {
                let q = qc * p.meta.tpp.powf(qe);
                if !(q > 0.0) || !q.is_finite() {
                    return f64::INFINITY;
                }
                acc.add(mae_linear_in_b(p, &p.schedule_terms(params.eps2, q), b));
            }
            acc.value() / n
        };
        let start = Some((params.q_const, params.q_exp));
        let (qc, qe, best) = grid_argmin(&grid.q_values, &grid.exp_values, true, false, zoom, start, &objective_q);
        params.q_const = qc;
        params.q_exp = qe;
        history.push(best);

        let mut best = best;
        if let Some(prev) = round_start {
            if let Some((moved, value)) = pattern_move(&prepared, &prev, &params, best) {
                params = moved;
                best = value;
                history.push(best);
            }
        }
        round_start = Some(params);

        log::debug!("round {rounds}: macro MAE {best:.3e}");
        if previous - best < TOL {
            break;
        }
        previous = best;
    }
    let macro_mae = macro_mae(&params, corpus)?;
    Ok(FitReport { params, macro_mae, history, rounds })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleFit {
    pub b: f64,
    pub q: f64,
    pub mae: f64,
}

/// Best `(b, q)` for a single curve by exhaustive grid search plus zoom.
pub fn per_curve_oracle_fit(
    curve: &NormalizedCurve,
    meta: &CurveMeta,
    params: &PredictorParams,
    grid: &FitGrid,
) -> Result<OracleFit> {
    oracle_fit_seeded(curve, meta, params, grid, None)
}

/// Like [`per_curve_oracle_fit`], also considering the `(b, q)` that `params`
/// implies for this curve, so the oracle never loses to the power-law fit.
pub fn per_curve_oracle_fit_from(
    curve: &NormalizedCurve,
    meta: &CurveMeta,
    params: &PredictorParams,
    grid: &FitGrid,
) -> Result<OracleFit> {
    params.validate_for(meta)?;
    oracle_fit_seeded(curve, meta, params, grid, Some((params.b(meta.tau), params.q(meta.tpp))))
}

fn oracle_fit_seeded(
    curve: &NormalizedCurve,
    meta: &CurveMeta,
    params: &PredictorParams,
    grid: &FitGrid,
    seed: Option<(f64, f64)>,
) -> Result<OracleFit> {
    params.validate()?;
    grid.validate()?;
    let prep = Prepared::new(params, curve, meta)?;
    let f = |b: f64, q: f64| mae_linear_in_b(&prep, &prep.schedule_terms(params.eps2, q), b);
    let (b, q, best) =
        grid_argmin(&grid.b_values, &grid.q_values, true, true, (grid.zoom_levels, grid.zoom_points), seed, &f);
    Ok(OracleFit { b, q, mae: best })
}

/// Persisted result of a corpus fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub m: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub b_const: f64,
    pub b_exp: f64,
    pub q_const: f64,
    pub q_exp: f64,
    pub corpus_hash: String,
    pub macro_mae: f64,
}

impl FitArtifact {
    pub fn new(params: &PredictorParams, corpus_hash: impl Into<String>, macro_mae: f64) -> Self {
        Self {
            m: params.m,
            eps1: params.eps1,
            eps2: params.eps2,
            b_const: params.b_const,
            b_exp: params.b_exp,
            q_const: params.q_const,
            q_exp: params.q_exp,
            corpus_hash: corpus_hash.into(),
            macro_mae,
        }
    }

    pub fn params(&self) -> PredictorParams {
        PredictorParams {
            m: self.m,
            eps1: self.eps1,
            eps2: self.eps2,
            b_const: self.b_const,
            b_exp: self.b_exp,
            q_const: self.q_const,
            q_exp: self.q_exp,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let artifact: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        artifact.params().validate()?;
        Ok(artifact)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::linspace;

    fn d2z() -> LrSchedule {
        LrSchedule::decay_to_zero(0.0)
    }

    /// Knots on `[0, 0.2)` plus the evaluation grid, so MAE sees no interpolation error.
    fn synthetic(params: &PredictorParams, meta: &CurveMeta, n: usize) -> NormalizedCurve {
        let mut grid: Vec<f64> = linspace(0.0, EVAL_START, n).into_iter().filter(|&t| t < EVAL_START).collect();
        grid.extend(eval_grid());
        let vals = predict_curve(params, meta, &grid).unwrap();
        NormalizedCurve::from_points(grid.into_iter().zip(vals).collect()).unwrap()
    }

    fn corpus(params: &PredictorParams) -> Vec<(NormalizedCurve, CurveMeta)> {
        let mut out = Vec::new();
        for tau in [0.1, 0.3, 1.0] {
            for tpp in [20.0, 80.0, 320.0, 1280.0] {
                let meta = CurveMeta::new(tau, tpp, d2z());
                out.push((synthetic(params, &meta, 1001), meta));
            }
        }
        out
    }

    #[test]
    fn self_normalized() {
        let p = PredictorParams::default();
        for sched in [d2z(), LrSchedule::constant(), LrSchedule::linear_decay(0.1, 0.1)] {
            let meta = CurveMeta::new(0.4, 50.0, sched);
            assert_eq!(predict(&p, &meta, 1.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn zero_b_is_shifted_power_law() {
        let p = PredictorParams { b_const: 0.0, ..Default::default() };
        let meta = CurveMeta::new(0.4, 50.0, d2z());
        // mpmath: (1001)^0.05
        assert!((predict(&p, &meta, 0.0).unwrap() - 1.412_608_137_974_008_7).abs() < 1e-14);
    }

    #[test]
    fn d2z_end_term() {
        let p = PredictorParams::default();
        let meta = CurveMeta::new(0.5, 20.0, d2z());
        let (b, q) = (p.b(0.5), p.q(20.0));
        let raw1 = 1.0 + b * 0.1f64.powf(q);
        let raw_half = (1.001f64 / 0.501).powf(0.05) + b * 0.6f64.powf(q);
        assert!((predict(&p, &meta, 0.5).unwrap() - raw_half / raw1).abs() < 1e-14);
    }

    #[test]
    fn constant_schedule_strictly_decreasing() {
        let p = PredictorParams::default();
        let meta = CurveMeta::new(0.3, 20.0, LrSchedule::constant());
        let vals = predict_curve(&p, &meta, &linspace(0.01, 1.0, 200)).unwrap();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn higher_tpp_decays_faster() {
        let p = PredictorParams::default();
        let lo = predict(&p, &CurveMeta::new(0.3, 20.0, d2z()), 0.1).unwrap();
        let hi = predict(&p, &CurveMeta::new(0.3, 1280.0, d2z()), 0.1).unwrap();
        assert!(hi < lo);
    }

    #[test]
    fn mae_examples() {
        let p = PredictorParams::default();
        let meta = CurveMeta::new(0.3, 80.0, d2z());
        let c = synthetic(&p, &meta, 2001);
        assert!(mae(&p, &c, &meta).unwrap() < 1e-12);
        let shifted = NormalizedCurve::from_points(c.points.iter().map(|&(t, l)| (t, l + 0.01)).collect()).unwrap();
        assert!((mae(&p, &shifted, &meta).unwrap() - 0.01).abs() < 1e-12);
        let short = NormalizedCurve::from_points(c.points[..1500].to_vec()).unwrap();
        assert!(matches!(mae(&p, &short, &meta), Err(Error::Coverage(_))));
    }

    #[test]
    fn macro_mae_is_mean_of_per_curve() {
        let truth = PredictorParams::default();
        let other = PredictorParams { b_const: 0.5, q_exp: -0.1, ..truth };
        let c = corpus(&truth);
        let per: Vec<f64> = c.iter().map(|(x, m)| mae(&other, x, m).unwrap()).collect();
        let expected = per.iter().sum::<f64>() / per.len() as f64;
        assert!((macro_mae(&other, &c).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn fit_recovers_synthetic_truth() {
        let truth = PredictorParams::default();
        let c = corpus(&truth);
        let init = PredictorParams { b_const: 1.0, b_exp: 0.0, q_const: 1.0, q_exp: 0.0, ..truth };
        let report = fit_alternating(&c, &init, &FitGrid::default(), 20).unwrap();
        assert!(report.macro_mae <= 1e-4, "macro MAE {}", report.macro_mae);
        assert!(report.params.b_exp < 0.0 && report.params.q_exp < 0.0, "{:?}", report.params);
        assert!(report.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn single_curve_fit_is_defined() {
        let truth = PredictorParams::default();
        let meta = CurveMeta::new(0.3, 80.0, d2z());
        let c = vec![(synthetic(&truth, &meta, 1001), meta)];
        let r = fit_alternating(&c, &truth, &FitGrid::with_resolution(9).unwrap(), 5).unwrap();
        assert!(r.macro_mae.is_finite());
    }

    #[test]
    fn oracle_recovers_grid_member() {
        let grid = FitGrid::default();
        let (b, q) = (grid.b_values[40], grid.q_values[30]);
        let p = PredictorParams::default();
        let sched = d2z();
        let ts = eval_grid();
        let vals: Vec<f64> = ts.iter().map(|&t| predict_with_bq(&p, &sched, b, q, t).unwrap()).collect();
        let curve = NormalizedCurve::from_points(ts.into_iter().zip(vals).collect()).unwrap();
        let fit = per_curve_oracle_fit(&curve, &CurveMeta::new(0.3, 80.0, sched), &p, &grid).unwrap();
        assert_eq!((fit.b, fit.q), (b, q));
        assert!(fit.mae < 1e-14);
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(matches!(
            fit_alternating(&[], &PredictorParams::default(), &FitGrid::default(), 3),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn artifact_round_trip() {
        let a = FitArtifact::new(&PredictorParams::default(), "abc", 0.01);
        let json = serde_json::to_string(&a).unwrap();
        let b: FitArtifact = serde_json::from_str(&json).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.params(), PredictorParams::default());
    }
}
