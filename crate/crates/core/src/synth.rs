//! Synthetic corpora with known ground truth.
//!
//! All randomness comes from `seed`: run `i` of a spec draws its noise from a
//! ChaCha8 generator seeded with `seed` (via `seed_from_u64`) on stream `i`,
//! one standard normal per log row in row order. NQM runs pass `seed` to
//! [`nqm::simulate`](crate::nqm::simulate) unchanged.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::curve::{LossCurve, LossSample, RunConfig};
use crate::error::{invalid_arg, Error, Result};
use crate::fmt::g17;
use crate::nqm::{self, NqmConfig};
use crate::predictor::{predict_curve, CurveMeta, PredictorParams};
use crate::scaling::{ChinchillaFit, ScalingPoint};
use crate::timescale::LrSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    None,
    AdditiveGaussian,
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    #[serde(default)]
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn additive(sigma: f64) -> Self {
        Self { kind: NoiseKind::AdditiveGaussian, sigma }
    }

    pub fn multiplicative(sigma: f64) -> Self {
        Self { kind: NoiseKind::Multiplicative, sigma }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(invalid_arg(format!("noise sigma must be non-negative, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Perturbs `values` in place using stream `stream` of `seed`.
    pub fn apply(&self, values: &mut [f64], seed: u64, stream: u64) {
        if self.kind == NoiseKind::None || self.sigma == 0.0 {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        for v in values.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            match self.kind {
                NoiseKind::AdditiveGaussian => *v += self.sigma * z,
                NoiseKind::Multiplicative => *v *= 1.0 + self.sigma * z,
                NoiseKind::None => {}
            }
        }
    }
}

fn default_run_id() -> String {
    "synth".into()
}
fn default_final_loss() -> f64 {
    2.3
}
fn default_tau() -> f64 {
    0.3
}
fn default_tpp() -> f64 {
    20.0
}
fn default_steps() -> u64 {
    1000
}
fn default_batch() -> u64 {
    1024
}
fn default_eta() -> f64 {
    1e-3
}
fn default_ramp_width() -> f64 {
    0.1
}

/// A predictor-shaped run and the hyperparameters that realize its `τ` and TPP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorRun {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default = "default_final_loss")]
    pub final_loss: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_tpp")]
    pub tpp: f64,
    #[serde(default = "default_steps")]
    pub total_steps: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub params: PredictorParams,
    #[serde(default = "default_batch")]
    pub batch_tokens: u64,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

impl Default for PredictorRun {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl PredictorRun {
    fn validate(&self) -> Result<()> {
        if !(self.final_loss > 0.0) || self.total_steps < 2 || self.batch_tokens == 0 || !(self.eta > 0.0) {
            return Err(invalid_arg("predictor run needs final_loss > 0, total_steps >= 2, batch_tokens > 0, eta > 0"));
        }
        self.meta().validate()?;
        self.params.validate_for(&self.meta())
    }

    pub fn meta(&self) -> CurveMeta {
        CurveMeta::new(self.tau, self.tpp, self.schedule)
    }

    /// `λ` is chosen so that `1 / (η λ T) = τ`; `N` rounds `D / TPP`.
    pub fn run_config(&self) -> RunConfig {
        let d = self.batch_tokens * self.total_steps;
        RunConfig {
            run_id: self.run_id.clone(),
            eta: self.eta,
            lr_adjust: 1.0,
            lambda: 1.0 / (self.eta * self.tau * self.total_steps as f64),
            batch_tokens: self.batch_tokens,
            dataset_tokens: d,
            params: ((d as f64 / self.tpp).round() as u64).max(1),
            schedule: self.schedule,
            allow_round_down: false,
        }
    }

    /// Noise-free losses at steps `1..=T`.
    pub fn clean_losses(&self) -> Result<Vec<f64>> {
        let t = self.total_steps as f64;
        let grid: Vec<f64> = (1..=self.total_steps).map(|s| s as f64 / t).collect();
        Ok(predict_curve(&self.params, &self.meta(), &grid)?.into_iter().map(|l| self.final_loss * l).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NqmRunParams {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub config: NqmConfig,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChinchillaPointsParams {
    pub fit: ChinchillaFit,
    pub n_values: Vec<f64>,
    pub tpp_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub run_id: String,
    pub tau: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingSweepParams {
    pub runs: Vec<SweepRun>,
    #[serde(default = "default_tpp")]
    pub tpp: f64,
    #[serde(default = "crossing_steps")]
    pub total_steps: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub params: PredictorParams,
}

fn crossing_steps() -> u64 {
    2000
}

impl Default for CrossingSweepParams {
    /// Run `x` (large `τ`) leads at mid-training; run `y` (small `τ`) ends lower.
    fn default() -> Self {
        Self {
            runs: vec![
                SweepRun { run_id: "x".into(), tau: 1.0, final_loss: 2.30 },
                SweepRun { run_id: "y".into(), tau: 0.3, final_loss: 2.25 },
            ],
            tpp: default_tpp(),
            total_steps: crossing_steps(),
            schedule: LrSchedule::default(),
            params: PredictorParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRampParams {
    #[serde(flatten)]
    pub base: PredictorRun,
    pub onset: f64,
    /// Added normalized loss once the ramp is complete.
    pub magnitude: f64,
    #[serde(default = "default_ramp_width")]
    pub ramp_width: f64,
    /// If set, the log replays rows from this fraction as a restart would.
    #[serde(default)]
    pub restart_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum SynthKind {
    PredictorCurve(PredictorRun),
    NqmRun(NqmRunParams),
    ChinchillaPoints(ChinchillaPointsParams),
    CrossingSweep(CrossingSweepParams),
    FaultRamp(FaultRampParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(flatten)]
    pub kind: SynthKind,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, noise: NoiseSpec, seed: u64) -> Self {
        Self { kind, noise, seed }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// One generated run: the rows as they appear in the log (restarts repeat
/// steps), the validated curve, and its config.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRun {
    pub rows: Vec<LossSample>,
    pub curve: LossCurve,
    pub config: Option<RunConfig>,
    pub meta: Option<CurveMeta>,
}

impl SynthRun {
    pub fn rows_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("sample serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub runs: Vec<SynthRun>,
    pub points: Vec<ScalingPoint>,
    pub truth: Value,
}

fn run_from_losses(
    run_id: &str,
    losses: Vec<f64>,
    total_steps: u64,
    noise: &NoiseSpec,
    seed: u64,
    stream: u64,
) -> Result<(Vec<LossSample>, LossCurve)> {
    let mut losses = losses;
    noise.apply(&mut losses, seed, stream);
    if let Some(bad) = losses.iter().position(|l| !(*l > 0.0)) {
        return Err(Error::Degenerate(format!("noise drove loss at row {bad} to {}", losses[bad])));
    }
    let rows: Vec<LossSample> = losses.into_iter().enumerate().map(|(i, l)| LossSample::new(i as u64 + 1, l)).collect();
    let curve = LossCurve::new(run_id, rows.clone(), total_steps)?;
    Ok((rows, curve))
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.noise.validate()?;
    let noise = &spec.noise;
    match &spec.kind {
        SynthKind::PredictorCurve(p) => {
            p.validate()?;
            let (rows, curve) = run_from_losses(&p.run_id, p.clean_losses()?, p.total_steps, noise, spec.seed, 0)?;
            let truth = json!({
                "kind": "predictor_curve",
                "run_id": p.run_id,
                "final_loss": p.final_loss,
                "tau": p.tau,
                "tpp": p.tpp,
                "params": p.params,
            });
            Ok(SynthOutput {
                runs: vec![SynthRun { rows, curve, config: Some(p.run_config()), meta: Some(p.meta()) }],
                points: vec![],
                truth,
            })
        }
        SynthKind::NqmRun(p) => {
            let trace = nqm::simulate(&p.config, p.seeds, spec.seed)?;
            let t = p.config.total_steps;
            let mean: Vec<f64> = trace.mean_loss[1..].to_vec();
            let (rows, curve) = run_from_losses(&p.run_id, mean, t, noise, spec.seed, 0)?;
            let closed: Vec<f64> =
                (1..=t).map(|s| nqm::expected_loss(&p.config, s as f64 / t as f64)).collect::<Result<_>>()?;
            let truth = json!({
                "kind": "nqm_run",
                "run_id": p.run_id,
                "config": p.config,
                "seeds": p.seeds,
                "closed_form": closed,
            });
            Ok(SynthOutput { runs: vec![SynthRun { rows, curve, config: None, meta: None }], points: vec![], truth })
        }
        SynthKind::ChinchillaPoints(p) => {
            p.fit.validate()?;
            if p.n_values.is_empty() || p.tpp_values.is_empty() {
                return Err(invalid_arg("chinchilla_points needs n_values and tpp_values"));
            }
            let mut points = Vec::new();
            for &n in &p.n_values {
                for &tpp in &p.tpp_values {
                    if !(n > 0.0) || !(tpp > 0.0) {
                        return Err(invalid_arg("n_values and tpp_values must be positive"));
                    }
                    points.push(ScalingPoint { n, d: n * tpp, loss: p.fit.loss(n, n * tpp) });
                }
            }
            let mut losses: Vec<f64> = points.iter().map(|x| x.loss).collect();
            noise.apply(&mut losses, spec.seed, 0);
            for (pt, l) in points.iter_mut().zip(losses) {
                if !(l > 0.0) {
                    return Err(Error::Degenerate(format!("noise drove a loss to {l}")));
                }
                pt.loss = l;
            }
            Ok(SynthOutput { runs: vec![], points, truth: json!({ "kind": "chinchilla_points", "fit": p.fit }) })
        }
        SynthKind::CrossingSweep(p) => {
            if p.runs.is_empty() {
                return Err(invalid_arg("crossing_sweep needs at least one run"));
            }
            let mut runs = Vec::with_capacity(p.runs.len());
            for (i, r) in p.runs.iter().enumerate() {
                let pr = PredictorRun {
                    run_id: r.run_id.clone(),
                    final_loss: r.final_loss,
                    tau: r.tau,
                    tpp: p.tpp,
                    total_steps: p.total_steps,
                    schedule: p.schedule,
                    params: p.params,
                    ..PredictorRun::default()
                };
                pr.validate()?;
                let (rows, curve) =
                    run_from_losses(&pr.run_id, pr.clean_losses()?, pr.total_steps, noise, spec.seed, i as u64)?;
                runs.push(SynthRun { rows, curve, config: Some(pr.run_config()), meta: Some(pr.meta()) });
            }
            let best = p.runs.iter().fold(&p.runs[0], |b, r| if r.final_loss < b.final_loss { r } else { b });
            let finals: serde_json::Map<String, Value> =
                p.runs.iter().map(|r| (r.run_id.clone(), json!(r.final_loss))).collect();
            let truth = json!({
                "kind": "crossing_sweep",
                "best_run_id": best.run_id,
                "finals": finals,
                "params": p.params,
            });
            Ok(SynthOutput { runs, points: vec![], truth })
        }
        SynthKind::FaultRamp(p) => {
            let b = &p.base;
            b.validate()?;
            if !(0.0..1.0).contains(&p.onset) || !(p.ramp_width > 0.0) || !p.magnitude.is_finite() {
                return Err(invalid_arg("fault_ramp needs onset in [0, 1), ramp_width > 0, finite magnitude"));
            }
            let t = b.total_steps as f64;
            let losses: Vec<f64> = b
                .clean_losses()?
                .into_iter()
                .enumerate()
                .map(|(i, l)| {
                    let x = (i + 1) as f64 / t;
                    let ramp = ((x - p.onset) / p.ramp_width).clamp(0.0, 1.0) * p.magnitude;
                    l + b.final_loss * ramp
                })
                .collect();
            let (mut rows, _) = run_from_losses(&b.run_id, losses, b.total_steps, noise, spec.seed, 0)?;
            let mut restart_t = Value::Null;
            if let Some(r) = p.restart_at {
                if !(r > 0.0 && r < 1.0) {
                    return Err(invalid_arg("restart_at must lie in (0, 1)"));
                }
                let at = ((r * t).round() as usize).max(1);
                let overlap = ((0.02 * t).round() as usize).max(1);
                let end = (at + overlap).min(rows.len());
                let mut log = rows[..end].to_vec();
                log.extend_from_slice(&rows[at - 1..]);
                rows = log;
                restart_t = json!(at as f64 / t);
            }
            let curve = LossCurve::from_log_rows(b.run_id.clone(), rows.clone(), b.total_steps)?;
            let truth = json!({
                "kind": "fault_ramp",
                "run_id": b.run_id,
                "final_loss": b.final_loss,
                "onset": p.onset,
                "magnitude": p.magnitude,
                "restart_t_hat": restart_t,
            });
            Ok(SynthOutput {
                runs: vec![SynthRun { rows, curve, config: Some(b.run_config()), meta: Some(b.meta()) }],
                points: vec![],
                truth,
            })
        }
    }
}

/// Writes `<run_id>.jsonl` and `<run_id>.config.json` per run,
/// `points.csv` for scaling points, and `truth.json`. Returns the paths written.
pub fn write_output(output: &SynthOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, text)?;
        written.push(path);
        Ok(())
    };
    for run in &output.runs {
        let id = run.curve.run_id();
        put(format!("{id}.jsonl"), run.rows_jsonl())?;
        if let Some(cfg) = &run.config {
            put(format!("{id}.config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
        }
        if let Some(meta) = &run.meta {
            put(format!("{id}.meta.json"), serde_json::to_string_pretty(meta)? + "\n")?;
        }
    }
    if !output.points.is_empty() {
        let mut csv = String::from("n,d,loss\n");
        for p in &output.points {
            csv.push_str(&format!("{},{},{}\n", g17(p.n), g17(p.d), g17(p.loss)));
        }
        put("points.csv".into(), csv)?;
    }
    put("truth.json".into(), serde_json::to_string_pretty(&output.truth)? + "\n")?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalize::normalize_final;
    use crate::predictor::predict;
    use crate::timescale::tau;

    #[test]
    fn predictor_curve_matches_predict() {
        let run = PredictorRun { schedule: LrSchedule::decay_to_zero(0.0), ..Default::default() };
        let out = generate(&SynthSpec::new(SynthKind::PredictorCurve(run.clone()), NoiseSpec::none(), 1)).unwrap();
        let n = normalize_final(&out.runs[0].curve).unwrap();
        for &(t, l) in &n.points {
            assert!((l - predict(&run.params, &run.meta(), t).unwrap()).abs() <= 1e-12);
        }
        let cfg = out.runs[0].config.as_ref().unwrap();
        assert!((tau(cfg).unwrap().tau / run.tau - 1.0).abs() < 1e-12);
        assert_eq!(cfg.total_steps().unwrap(), 1000);
    }

    #[test]
    fn spec_json_shape() {
        let text = r#"{"kind": "fault_ramp", "params": {"onset": 0.6, "magnitude": 0.05}, "seed": 3,
                       "noise": {"kind": "multiplicative", "sigma": 0.001}}"#;
        let spec: SynthSpec = serde_json::from_str(text).unwrap();
        let out = generate(&spec).unwrap();
        assert_eq!(out.truth["onset"], json!(0.6));
        let back: SynthSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let spec = SynthSpec::new(SynthKind::CrossingSweep(Default::default()), NoiseSpec::additive(0.01), 9);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.runs[0].curve.losses()[..10], a.runs[1].curve.losses()[..10]);
        let other = generate(&SynthSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.runs[0].curve.losses(), other.runs[0].curve.losses());
        assert_eq!(a.truth["best_run_id"], json!("y"));
    }

    #[test]
    fn fault_ramp_with_restart() {
        let p = FaultRampParams {
            base: PredictorRun { total_steps: 1000, ..Default::default() },
            onset: 0.6,
            magnitude: 0.05,
            ramp_width: 0.1,
            restart_at: Some(0.4),
        };
        let out = generate(&SynthSpec::new(SynthKind::FaultRamp(p), NoiseSpec::none(), 0)).unwrap();
        let run = &out.runs[0];
        assert!(run.rows.len() > 1000);
        assert_eq!(run.curve.len(), 1000);
        assert_eq!(run.curve.annotations().len(), 1);
        assert_eq!(run.curve.t_hat_of(run.curve.annotations()[0].step), 0.4);
        let l = run.curve.losses();
        let clean = PredictorRun { total_steps: 1000, ..Default::default() }.clean_losses().unwrap();
        assert_eq!(l[500], clean[500]);
        assert!((l[999] - clean[999] - 2.3 * 0.05).abs() < 1e-12);
    }

    #[test]
    fn nqm_run_carries_closed_form() {
        let cfg = NqmConfig::constant_lr(1.0, 1.0, 1.0, 0.5, 200);
        let spec = SynthSpec::new(
            SynthKind::NqmRun(NqmRunParams { run_id: "n".into(), config: cfg, seeds: 64 }),
            NoiseSpec::none(),
            5,
        );
        let out = generate(&spec).unwrap();
        assert_eq!(out.truth["closed_form"].as_array().unwrap().len(), 200);
        assert_eq!(out.runs[0].curve.losses(), nqm::simulate(&cfg, 64, 5).unwrap().mean_loss[1..].to_vec());
    }

    #[test]
    fn chinchilla_points_exact_without_noise() {
        let fit = ChinchillaFit { e: 1.7, a: 400.0, alpha: 0.34, b: 410.0, beta: 0.28 };
        let p = ChinchillaPointsParams { fit, n_values: vec![1e7, 1e8], tpp_values: vec![10.0, 20.0] };
        let out = generate(&SynthSpec::new(SynthKind::ChinchillaPoints(p), NoiseSpec::none(), 0)).unwrap();
        assert_eq!(out.points.len(), 4);
        assert!(out.points.iter().all(|x| x.loss == fit.loss(x.n, x.d)));
    }

    #[test]
    fn negative_sigma_rejected() {
        let spec = SynthSpec::new(SynthKind::PredictorCurve(Default::default()), NoiseSpec::additive(-1.0), 0);
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn written_files_are_stable() {
        let spec = SynthSpec::new(SynthKind::CrossingSweep(Default::default()), NoiseSpec::multiplicative(0.002), 4);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let pa = write_output(&generate(&spec).unwrap(), a.path()).unwrap();
        let pb = write_output(&generate(&spec).unwrap(), b.path()).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
    }
}
