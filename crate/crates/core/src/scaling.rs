//! Chinchilla-form scaling laws, the constant-LR shape law, and the
//! compute cost of shrinking a model below its compute-optimal size.

use nalgebra::{DMatrix, DVector, Matrix5, Vector5};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};

/// `L(N, D) = E + A N^{−α} + B D^{−β}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChinchillaFit {
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "A")]
    pub a: f64,
    pub alpha: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub beta: f64,
}

impl ChinchillaFit {
    pub fn validate(&self) -> Result<()> {
        let all = [self.e, self.a, self.alpha, self.b, self.beta];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(invalid_arg("Chinchilla coefficients must be finite"));
        }
        if self.e < 0.0 || self.a <= 0.0 || self.b <= 0.0 {
            return Err(invalid_arg("Chinchilla fit needs E >= 0 and A, B > 0"));
        }
        for (name, x) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(x > 0.0 && x < 2.0) {
                return Err(invalid_arg(format!("{name} = {x} outside (0, 2)")));
            }
        }
        Ok(())
    }

    /// Symmetric law `α = β = a`, `B = A r^a`.
    pub fn from_symmetric(e: f64, a_coef: f64, law: SymmetricLaw) -> Self {
        Self { e, a: a_coef, alpha: law.a, b: law.b_coefficient(a_coef), beta: law.a }
    }

    pub fn loss(&self, n: f64, d: f64) -> f64 {
        self.e + self.a * n.powf(-self.alpha) + self.b * d.powf(-self.beta)
    }

    fn params(&self) -> Vector5<f64> {
        Vector5::new(self.e, self.a, self.alpha, self.b, self.beta)
    }

    fn from_params(p: &Vector5<f64>) -> Self {
        Self { e: p[0], a: p[1], alpha: p[2], b: p[3], beta: p[4] }
    }
}

/// Chinchilla law with equal exponents, parameterized by the shared exponent
/// and the compute-optimal tokens-per-parameter ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymmetricLaw {
    pub a: f64,
    pub r: f64,
}

impl SymmetricLaw {
    /// Literature defaults: `a = 0.35`, `r = 20`.
    pub const LITERATURE: SymmetricLaw = SymmetricLaw { a: 0.35, r: 20.0 };

    pub fn b_coefficient(&self, a_coef: f64) -> f64 {
        a_coef * self.r.powf(self.a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n: f64,
    pub d: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitObjective {
    /// Squared residuals of the loss itself.
    #[default]
    Loss,
    /// Squared residuals of log-loss, for multiplicative noise.
    LogLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChinchillaFitReport {
    pub fit: ChinchillaFit,
    /// Euclidean norm of the residual vector under the chosen objective.
    pub residual_norm: f64,
}

const START_EXPONENTS: [f64; 4] = [0.15, 0.3, 0.5, 0.8];

/// Least-squares fit of the Chinchilla form.
///
/// For fixed exponents the model is linear in `(E, A, B)`, so the outer search
/// runs over `(α, β)` only, solving a nonnegative linear least-squares problem
/// at every evaluation. 16 deterministic starts are refined by Nelder–Mead and
/// then polished by Levenberg–Marquardt on all five parameters; the best
/// residual wins with ties broken by lexicographic parameter order.
pub fn fit_chinchilla(points: &[ScalingPoint], objective: FitObjective) -> Result<ChinchillaFitReport> {
    check_design(points)?;
    let starts: Vec<(f64, f64)> =
        START_EXPONENTS.iter().flat_map(|&a| START_EXPONENTS.iter().map(move |&b| (a, b))).collect();
    let candidates: Vec<Option<(f64, ChinchillaFit)>> =
        starts.par_iter().map(|&(a0, b0)| fit_from_start(points, objective, a0, b0)).collect();
    let best =
        candidates.into_iter().flatten().filter(|(cost, fit)| cost.is_finite() && fit.validate().is_ok()).min_by(
            |x, y| {
                x.0.total_cmp(&y.0).then_with(|| {
                    let (px, py) = (x.1.params(), y.1.params());
                    px.iter()
                        .zip(py.iter())
                        .map(|(a, b)| a.total_cmp(b))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
            },
        );
    match best {
        Some((cost, fit)) => Ok(ChinchillaFitReport { fit, residual_norm: cost.sqrt() }),
        None => Err(Error::NonConvergence("no start produced a valid fit".into())),
    }
}

fn check_design(points: &[ScalingPoint]) -> Result<()> {
    if points.len() < 5 {
        return Err(Error::Degenerate(format!("need at least 5 points, got {}", points.len())));
    }
    for p in points {
        if !(p.n > 0.0 && p.d > 0.0 && p.loss > 0.0) || !(p.n.is_finite() && p.d.is_finite() && p.loss.is_finite()) {
            return Err(invalid_arg("scaling points need positive finite N, D and loss"));
        }
    }
    let distinct = |f: fn(&ScalingPoint) -> f64| {
        let mut v: Vec<f64> = points.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    if distinct(|p| p.n) < 2 || distinct(|p| p.d) < 2 {
        return Err(Error::Degenerate("need at least two distinct values of both N and D".into()));
    }
    Ok(())
}

fn residuals(points: &[ScalingPoint], objective: FitObjective, fit: &ChinchillaFit) -> DVector<f64> {
    DVector::from_iterator(
        points.len(),
        points.iter().map(|p| {
            let m = fit.loss(p.n, p.d);
            match objective {
                FitObjective::Loss => p.loss - m,
                FitObjective::LogLoss => {
                    if m > 0.0 {
                        p.loss.ln() - m.ln()
                    } else {
                        f64::INFINITY
                    }
                }
            }
        }),
    )
}

fn cost(points: &[ScalingPoint], objective: FitObjective, fit: &ChinchillaFit) -> f64 {
    let r = residuals(points, objective, fit);
    let c = r.norm_squared();
    if c.is_finite() {
        c
    } else {
        f64::INFINITY
    }
}

/// Best nonnegative `(E, A, B)` for fixed exponents, by enumerating active sets.
fn linear_coefficients(
    points: &[ScalingPoint],
    objective: FitObjective,
    alpha: f64,
    beta: f64,
) -> Option<ChinchillaFit> {
    let n = points.len();
    let weights: Vec<f64> = points
        .iter()
        .map(|p| match objective {
            FitObjective::Loss => 1.0,
            FitObjective::LogLoss => 1.0 / p.loss,
        })
        .collect();
    let columns: [Vec<f64>; 3] = [
        weights.clone(),
        points.iter().zip(&weights).map(|(p, w)| w * p.n.powf(-alpha)).collect(),
        points.iter().zip(&weights).map(|(p, w)| w * p.d.powf(-beta)).collect(),
    ];
    let y = DVector::from_iterator(n, points.iter().zip(&weights).map(|(p, w)| w * p.loss));
    let mut best: Option<(f64, [f64; 3])> = None;
    // Subsets always keep A and B (they must be positive); E may be pinned at 0.
    for mask in [0b111u8, 0b011] {
        let active: Vec<usize> = (0..3).filter(|i| mask & (1 << (2 - i)) != 0).collect();
        let x = DMatrix::from_fn(n, active.len(), |r, c| columns[active[c]][r]);
        let sol = x.clone().svd(true, true).solve(&y, 1e-15).ok()?;
        let mut coef = [0.0; 3];
        for (k, &i) in active.iter().enumerate() {
            coef[i] = sol[k];
        }
        if coef[0] < 0.0 || coef[1] <= 0.0 || coef[2] <= 0.0 {
            continue;
        }
        let r = (&y - &x * &sol).norm_squared();
        if best.is_none_or(|(c, _)| r < c) {
            best = Some((r, coef));
        }
    }
    best.map(|(_, c)| ChinchillaFit { e: c[0], a: c[1], alpha, b: c[2], beta })
}

fn fit_from_start(points: &[ScalingPoint], objective: FitObjective, a0: f64, b0: f64) -> Option<(f64, ChinchillaFit)> {
    let profile = |x: &[f64]| -> f64 {
        if !(x[0] > 0.0 && x[0] < 2.0 && x[1] > 0.0 && x[1] < 2.0) {
            return f64::INFINITY;
        }
        match linear_coefficients(points, objective, x[0], x[1]) {
            Some(fit) => cost(points, objective, &fit),
            None => f64::INFINITY,
        }
    };
    let xs = nelder_mead(&profile, &[a0, b0], 0.05, 4000);
    let start = linear_coefficients(points, objective, xs[0], xs[1])?;
    let polished = levenberg_marquardt(points, objective, start);
    let c = cost(points, objective, &polished);
    Some((c, polished))
}

/// Nelder–Mead simplex minimization.
pub(crate) fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, max_iter: usize) -> Vec<f64> {
    let dim = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..dim {
        let mut x = x0.to_vec();
        x[i] += step;
        let fx = f(&x);
        simplex.push((x, fx));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[dim].1);
        let size = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if size < 1e-13 || (worst - best).abs() <= 1e-30 {
            break;
        }
        let centroid: Vec<f64> =
            (0..dim).map(|j| simplex[..dim].iter().map(|(x, _)| x[j]).sum::<f64>() / dim as f64).collect();
        let along =
            |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[dim].0).map(|(c, w)| c + t * (w - c)).collect() };
        let reflected = along(-1.0);
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = along(-2.0);
            let fe = f(&expanded);
            simplex[dim] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (reflected, fr);
        } else {
            let contracted = if fr < simplex[dim].1 { along(-0.5) } else { along(0.5) };
            let fc = f(&contracted);
            if fc < simplex[dim].1.min(fr) {
                simplex[dim] = (contracted, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = entry.0.iter().zip(&x_best).map(|(v, b)| b + 0.5 * (v - b)).collect();
                    let fx = f(&x);
                    *entry = (x, fx);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0).0
}

fn jacobian(points: &[ScalingPoint], objective: FitObjective, fit: &ChinchillaFit) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), 5, |i, j| {
        let p = points[i];
        let na = p.n.powf(-fit.alpha);
        let db = p.d.powf(-fit.beta);
        let dm = match j {
            0 => 1.0,
            1 => na,
            2 => -fit.a * na * p.n.ln(),
            3 => db,
            _ => -fit.b * db * p.d.ln(),
        };
        match objective {
            FitObjective::Loss => dm,
            FitObjective::LogLoss => dm / fit.loss(p.n, p.d),
        }
    })
}

fn levenberg_marquardt(points: &[ScalingPoint], objective: FitObjective, start: ChinchillaFit) -> ChinchillaFit {
    let mut fit = start;
    let mut c = cost(points, objective, &fit);
    let mut mu = 1e-3;
    for _ in 0..200 {
        let r = residuals(points, objective, &fit);
        let j = jacobian(points, objective, &fit);
        let jtj: Matrix5<f64> = (j.transpose() * &j).fixed_view::<5, 5>(0, 0).into_owned();
        let jtr: Vector5<f64> = (j.transpose() * &r).fixed_rows::<5>(0).into_owned();
        let mut improved = false;
        for _ in 0..30 {
            let mut damped = jtj;
            for k in 0..5 {
                damped[(k, k)] += mu * jtj[(k, k)].max(1e-300);
            }
            let Some(delta) = damped.lu().solve(&jtr) else {
                mu *= 10.0;
                continue;
            };
            let mut p = fit.params() + delta;
            p[0] = p[0].max(0.0);
            let candidate = ChinchillaFit::from_params(&p);
            let cc = if candidate.validate().is_ok() { cost(points, objective, &candidate) } else { f64::INFINITY };
            if cc < c {
                let rel = (c - cc) / c.max(1e-300);
                fit = candidate;
                c = cc;
                mu = (mu * 0.3).max(1e-12);
                improved = true;
                if rel < 1e-15 {
                    return fit;
                }
                break;
            }
            mu *= 10.0;
        }
        if !improved || c == 0.0 {
            break;
        }
    }
    fit
}

/// Loss-optimal `(N_opt, D_opt)` under `C = 6 N D`:
/// `N_opt = G (C/6)^{β/(α+β)}`, `D_opt = G^{−1} (C/6)^{α/(α+β)}` with
/// `G = (α A / (β B))^{1/(α+β)}`.
pub fn optimal_allocation_general(compute: f64, fit: &ChinchillaFit) -> Result<(f64, f64)> {
    if !(compute > 0.0) || !compute.is_finite() {
        return Err(invalid_arg(format!("compute must be positive, got {compute}")));
    }
    fit.validate()?;
    let sum = fit.alpha + fit.beta;
    let g = (fit.alpha * fit.a / (fit.beta * fit.b)).powf(1.0 / sum);
    let base = compute / 6.0;
    Ok((g * base.powf(fit.beta / sum), base.powf(fit.alpha / sum) / g))
}

/// Symmetric-law allocation; `D_opt / N_opt = r`.
pub fn optimal_allocation(compute: f64, law: SymmetricLaw, a_coef: f64) -> Result<(f64, f64)> {
    if !(law.a > 0.0) || !(law.r > 0.0) || !(a_coef > 0.0) {
        return Err(invalid_arg("symmetric law needs positive a, r and A"));
    }
    optimal_allocation_general(compute, &ChinchillaFit::from_symmetric(0.0, a_coef, law))
}

/// Normalized constant-LR curve in terms of the overtraining factor `v`:
/// `ℓ(t̂, v) = (1 + v^{−a} t̂^{−a}) / (1 + v^{−a})`.
pub fn normalized_tpp_curve(t_hat: f64, v: f64, a: f64) -> Result<f64> {
    check_fraction(t_hat)?;
    if !(v > 0.0) || !(a > 0.0) {
        return Err(invalid_arg("v and a must be positive"));
    }
    let va = v.powf(-a);
    Ok((1.0 + va * t_hat.powf(-a)) / (1.0 + va))
}

/// Normalized constant-LR curve at final tokens-per-parameter `k`:
/// `ℓ(t̂, k) = (A + B t̂^{−a} k^{−a}) / (A + B k^{−a})`. Takes no model size:
/// the normalized curve does not depend on it.
pub fn normalized_constant_lr_curve(t_hat: f64, k: f64, fit: &ChinchillaFit) -> Result<f64> {
    check_fraction(t_hat)?;
    if !(k > 0.0) {
        return Err(invalid_arg("k must be positive"));
    }
    if (fit.alpha - fit.beta).abs() > 1e-12 {
        return Err(invalid_arg("constant-LR shape law needs alpha == beta"));
    }
    let a = fit.alpha;
    let bk = fit.b * k.powf(-a);
    Ok((fit.a + bk * t_hat.powf(-a)) / (fit.a + bk))
}

fn check_fraction(t_hat: f64) -> Result<()> {
    if t_hat > 0.0 && t_hat <= 1.0 {
        Ok(())
    } else {
        Err(invalid_arg(format!("t_hat must lie in (0, 1], got {t_hat}")))
    }
}

/// Smallest feasible parameter fraction, `2^{−1/a}`.
pub fn parameter_wall(a: f64) -> f64 {
    2f64.powf(-1.0 / a)
}

/// Extra-token factor `k_D = (2 − k_N^{−a})^{−1/a}` needed by a model with
/// `k_N` times the compute-optimal parameters to match the optimal loss.
pub fn compression_tokens_factor(k_n: f64, a: f64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(invalid_arg("exponent a must be positive"));
    }
    if !(k_n <= 1.0) {
        return Err(invalid_arg(format!("k_N = {k_n} is above 1, outside the modeled range")));
    }
    let gap = 2.0 - k_n.powf(-a);
    if !(gap > 0.0) {
        return Err(Error::Infeasible(format!("k_N = {k_n} is below the parameter wall {}", parameter_wall(a))));
    }
    Ok(gap.powf(-1.0 / a))
}

/// Compute overhead `C / C_opt = k_N k_D`.
pub fn compression_cost(k_n: f64, a: f64) -> Result<f64> {
    Ok(k_n * compression_tokens_factor(k_n, a)?)
}

/// Operating point whose trained tokens-per-parameter is `multiple` times the
/// compute-optimal ratio, i.e. `k_D / k_N = multiple`. Returns `(k_N, k_D)`.
pub fn compression_at_tpp_multiple(multiple: f64, a: f64) -> Result<(f64, f64)> {
    if !(multiple >= 1.0) || !multiple.is_finite() {
        return Err(invalid_arg("TPP multiple must be at least 1"));
    }
    // k_D / k_N decreases monotonically from +inf at the wall to 1 at k_N = 1.
    let ratio = |k: f64| compression_tokens_factor(k, a).map(|kd| kd / k);
    let (mut lo, mut hi) = (parameter_wall(a), 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match ratio(mid) {
            Ok(r) if r > multiple => lo = mid,
            Ok(_) => hi = mid,
            Err(_) => lo = mid,
        }
    }
    Ok((hi, compression_tokens_factor(hi, a)?))
}

/// Effective tokens-per-parameter per expert.
pub fn effective_tpp_moe(dense_tpp: f64, experts: u32) -> Result<f64> {
    if experts == 0 {
        return Err(invalid_arg("expert count must be at least 1"));
    }
    Ok(dense_tpp / experts as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn truth() -> ChinchillaFit {
        ChinchillaFit { e: 1.7, a: 100.0, alpha: 0.35, b: 100.0 * 20f64.powf(0.35), beta: 0.35 }
    }

    fn design() -> Vec<(f64, f64)> {
        let ns = [1e6, 1e7, 1e8, 1e9, 1e10];
        let tpps = [2.0, 10.0, 50.0, 250.0, 1250.0];
        ns.iter().flat_map(|&n| tpps.iter().map(move |&k| (n, n * k))).collect()
    }

    #[test]
    fn recovers_noiseless_parameters() {
        let t = truth();
        let pts: Vec<ScalingPoint> =
            design().into_iter().map(|(n, d)| ScalingPoint { n, d, loss: t.loss(n, d) }).collect();
        let rep = fit_chinchilla(&pts, FitObjective::Loss).unwrap();
        let f = rep.fit;
        for (got, want) in [(f.e, t.e), (f.a, t.a), (f.alpha, t.alpha), (f.b, t.b), (f.beta, t.beta)] {
            assert!(((got - want) / want).abs() < 1e-6, "got {got} want {want}");
        }
        assert!(rep.residual_norm < 1e-9);
    }

    #[test]
    fn recovers_exponents_under_multiplicative_noise() {
        let t = truth();
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<ScalingPoint> = design()
                .into_iter()
                .map(|(n, d)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    ScalingPoint { n, d, loss: t.loss(n, d) * (1.0 + 0.01 * z) }
                })
                .collect();
            for obj in [FitObjective::Loss, FitObjective::LogLoss] {
                let f = fit_chinchilla(&pts, obj).unwrap().fit;
                assert!((f.alpha - 0.35).abs() < 0.05, "seed {seed} {obj:?} alpha {}", f.alpha);
                assert!((f.beta - 0.35).abs() < 0.05, "seed {seed} {obj:?} beta {}", f.beta);
            }
        }
    }

    #[test]
    fn degenerate_designs_rejected() {
        let t = truth();
        let three: Vec<ScalingPoint> = [(1e7, 2e8), (1e8, 2e9), (1e9, 2e10)]
            .iter()
            .map(|&(n, d)| ScalingPoint { n, d, loss: t.loss(n, d) })
            .collect();
        assert!(matches!(fit_chinchilla(&three, FitObjective::Loss), Err(Error::Degenerate(_))));
        let same_n: Vec<ScalingPoint> =
            (1..=6).map(|i| ScalingPoint { n: 1e8, d: 1e9 * i as f64, loss: t.loss(1e8, 1e9 * i as f64) }).collect();
        assert!(matches!(fit_chinchilla(&same_n, FitObjective::Loss), Err(Error::Degenerate(_))));
    }

    #[test]
    fn tpp_curve_values() {
        assert_eq!(normalized_tpp_curve(1.0, 3.7, 0.35).unwrap(), 1.0);
        let v = normalized_tpp_curve(0.5, 1.0, 0.35).unwrap();
        // (1 + 0.5^{-0.35}) / 2 = (1 + 1.27456...) / 2
        assert!((v - 1.137_280_9).abs() < 1e-6, "{v}");
        assert!(normalized_tpp_curve(0.2, 10.0, 0.35).unwrap() < normalized_tpp_curve(0.2, 1.0, 0.35).unwrap());
        assert!(normalized_tpp_curve(0.0, 1.0, 0.35).is_err());
    }

    #[test]
    fn tpp_curve_limits_and_monotonicity() {
        for &a in &[0.3, 0.35, 0.4] {
            for &v in &[0.5, 1.0, 10.0] {
                let mut prev = f64::INFINITY;
                for i in 1..=100 {
                    let l = normalized_tpp_curve(i as f64 / 100.0, v, a).unwrap();
                    assert!(l < prev || i == 1);
                    prev = l;
                }
            }
            assert!((normalized_tpp_curve(0.3, 1e12, a).unwrap() - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_lr_curve_matches_tpp_form() {
        let law = SymmetricLaw::LITERATURE;
        let fit = ChinchillaFit::from_symmetric(1.5, 406.4, law);
        for &k in &[5.0, 20.0, 80.0, 1000.0] {
            for i in 1..=50 {
                let t = i as f64 / 50.0;
                let x = normalized_constant_lr_curve(t, k, &fit).unwrap();
                let y = normalized_tpp_curve(t, k / law.r, law.a).unwrap();
                assert!((x - y).abs() <= 1e-12);
            }
        }
        let unit = ChinchillaFit { e: 0.0, a: 1.0, alpha: 0.35, b: 1.0, beta: 0.35 };
        let v = normalized_constant_lr_curve(0.25, 1.0, &unit).unwrap();
        assert!((v - (1.0 + 0.25f64.powf(-0.35)) / 2.0).abs() < 1e-15);
        assert!((v - 1.312_252_396_356_235_5).abs() < 1e-15, "{v}");
        assert_eq!(normalized_constant_lr_curve(1.0, 7.0, &unit).unwrap(), 1.0);
        assert!(normalized_constant_lr_curve(0.0, 7.0, &unit).is_err());
    }

    #[test]
    fn compression_values() {
        assert_eq!(compression_tokens_factor(1.0, 0.35).unwrap(), 1.0);
        assert_eq!(compression_cost(1.0, 0.35).unwrap(), 1.0);
        // Reference values evaluated at 30 digits with mpmath.
        let kd = compression_tokens_factor(0.38, 0.35).unwrap();
        assert!((kd - 4.367_115_524_662_534).abs() < 1e-12, "{kd}");
        let c = compression_cost(0.38, 0.35).unwrap();
        assert!((c - 1.659_503_899_371_763).abs() < 1e-12, "{c}");
    }

    #[test]
    fn compression_at_234_tpp() {
        // Training at 234 TPP against a 20 TPP optimum.
        let (kn, kd) = compression_at_tpp_multiple(234.0 / 20.0, 0.35).unwrap();
        assert!((kd / kn - 11.7).abs() < 1e-9);
        assert!((1.0 - kn - 0.62).abs() < 0.005, "k_N = {kn}");
        assert!((kn * kd - 1.67).abs() < 0.005, "cost = {}", kn * kd);
        assert_eq!(compression_at_tpp_multiple(1.0, 0.35).unwrap().0, 1.0);
    }

    #[test]
    fn compression_wall_and_range() {
        let a = 0.35;
        let wall = parameter_wall(a);
        assert!(matches!(compression_tokens_factor(wall, a), Err(Error::Infeasible(_))));
        assert!(matches!(compression_tokens_factor(wall * 0.9, a), Err(Error::Infeasible(_))));
        assert!(compression_tokens_factor(wall + 1e-9, a).unwrap() > 1e6);
        assert!(matches!(compression_tokens_factor(1.01, a), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn compression_cost_increases_toward_wall() {
        for &a in &[0.3, 0.35, 0.4] {
            let wall = parameter_wall(a);
            let mut prev = 1.0;
            for i in 1..=400 {
                let k = 1.0 - (1.0 - wall) * i as f64 / 401.0;
                let c = compression_cost(k, a).unwrap();
                assert!(c > prev, "a={a} k={k}");
                prev = c;
            }
        }
    }

    #[test]
    fn allocation_identities() {
        let law = SymmetricLaw::LITERATURE;
        for &c in &[1e18, 6.0 * 20.0 * 1e18, 3.7e23] {
            let (n, d) = optimal_allocation(c, law, 406.4).unwrap();
            assert!((d / n / 20.0 - 1.0).abs() < 1e-12);
            assert!((6.0 * n * d / c - 1.0).abs() < 1e-9);
        }
        let (n, d) = optimal_allocation(6.0 * 20.0 * 1e18, law, 1.0).unwrap();
        assert!((n / 1e9 - 1.0).abs() < 1e-12);
        assert!((d / 2e10 - 1.0).abs() < 1e-12);
        assert!(optimal_allocation(0.0, law, 1.0).is_err());
    }

    #[test]
    fn moe_effective_tpp() {
        assert_eq!(effective_tpp_moe(20.0, 1).unwrap(), 20.0);
        assert_eq!(effective_tpp_moe(20.0, 4).unwrap(), 5.0);
        assert_eq!(effective_tpp_moe(20.0, 32).unwrap(), 0.625);
        assert!(effective_tpp_moe(20.0, 0).is_err());
    }
}
