use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use collapsekit::curve::{ingest, LogFormat, SmoothWindow};
use collapsekit::earlystop::{decide_with, evaluate_strategy_with, EarlyStopOptions, Strategy, SweepEntry};
use collapsekit::fmt::g17;
use collapsekit::monitor::{watch, MonitorEvent, MonitorPolicy, WatchOptions};
use collapsekit::normalize::{
    normalize_early_align, normalize_estimate, normalize_final_with_offset, residuals, shared_grid, AlignWindow,
};
use collapsekit::nqm::{self, NqmConfig};
use collapsekit::predictor::{fit_alternating, predict_curve, FitArtifact, FitGrid};
use collapsekit::scaling::{compression_cost, compression_tokens_factor, ChinchillaFit};
use collapsekit::stats::linspace;
use collapsekit::synth::{self, SynthSpec};
use collapsekit::timescale::{instantaneous_tau, tau};
use collapsekit::{CurveMeta, LossCurve, LrSchedule, NormalizedCurve, PredictorParams, RunConfig};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::manifest::{LoadedEntry, Manifest, ManifestEntry, MetaOverrides};
use crate::{Cli, Command};

pub fn run(cli: &Cli) -> Result<u8> {
    let window = parse_smooth_window(&cli.smooth_window)?;
    match &cli.command {
        Command::Ingest(a) => {
            let format = match &a.format {
                Some(f) => f.parse()?,
                None => LogFormat::from_path(&a.input),
            };
            let config = a.config.as_deref().map(RunConfig::load).transpose()?;
            let run_id = a.run_id.clone().or_else(|| config.as_ref().map(|c| c.run_id.clone())).unwrap_or_default();
            let curve = ingest(&a.input, format, run_id, a.total_steps, config.as_ref())?;
            let text = match a.out_format.parse::<LogFormat>()? {
                LogFormat::Csv => curve.to_csv(),
                LogFormat::Jsonl => curve.to_jsonl(),
            };
            log::info!("{} samples, {} restart annotations", curve.len(), curve.annotations().len());
            emit(&a.out, &text)?;
        }
        Command::Normalize(a) => {
            let config = a.config.as_deref().map(RunConfig::load).transpose()?;
            let curve = ingest(&a.input, LogFormat::from_path(&a.input), "", a.total_steps, config.as_ref())?;
            let curve = smooth(&curve, window, config.as_ref())?;
            let normalized = match a.method.as_str() {
                "final" => normalize_final_with_offset(&curve, a.offset)?,
                "early-align" | "early_align" => {
                    let path = a.reference.as_deref().context("--method early-align needs --reference")?;
                    normalize_early_align(&curve, &load_reference(path)?, AlignWindow::default())?
                }
                "estimate" => {
                    let path = a.scaling_fit.as_deref().context("--method estimate needs --scaling-fit")?;
                    let fit: ChinchillaFit = read_json(path)?;
                    let cfg = config.as_ref().context("--method estimate needs --config for N and D")?;
                    normalize_estimate(&curve, &fit, cfg.params as f64, cfg.dataset_tokens as f64)?
                }
                other => bail!("unknown normalization method {other:?}"),
            };
            log::info!("normalizer {}", normalized.normalizer);
            emit(&a.out, &normalized.to_csv())?;
        }
        Command::Residuals(a) => {
            let ca = load_reference(&a.a)?;
            let cb = load_reference(&a.b)?;
            let report = residuals(&ca, &cb, &shared_grid(&ca, &cb), a.window)?;
            let s = report.summary();
            let summary = serde_json::to_string(&json!({ "max_abs": s.max_abs, "rolling_mae": s.rolling_mae }))?;
            match &a.summary {
                Some(p) => std::fs::write(p, summary + "\n").with_context(|| format!("writing {}", p.display()))?,
                None => eprintln!("{summary}"),
            }
            emit(&a.out, &report.to_csv())?;
        }
        Command::Nqm(a) => {
            let config = NqmConfig {
                h: a.h,
                sigma_x2: a.sigma2,
                theta0: a.theta0,
                tau: a.tau,
                total_steps: a.steps,
                schedule: parse_schedule(&a.schedule)?,
            };
            let trace = nqm::simulate(&config, a.seeds, cli.seed)?;
            let closed = config.schedule.is_constant();
            let mut out = String::from("t_hat,mean_loss,closed_form,abs_rel_err\n");
            for (t, m) in trace.t_hat.iter().zip(&trace.mean_loss) {
                let _ = write!(out, "{},{}", g17(*t), g17(*m));
                if closed {
                    let c = nqm::expected_loss(&config, *t)?;
                    let err = if c == 0.0 { (m - c).abs() } else { ((m - c) / c).abs() };
                    let _ = writeln!(out, ",{},{}", g17(c), g17(err));
                } else {
                    out.push_str(",,\n");
                }
            }
            emit(&a.out, &out)?;
        }
        Command::Compress(a) => {
            let kns = match (&a.kn, &a.sweep) {
                (Some(k), None) => vec![*k],
                (None, Some(s)) => parse_sweep(s)?,
                _ => bail!("pass exactly one of --kn or --sweep"),
            };
            let mut out = String::from("k_N,k_D,cost_ratio\n");
            for k in kns {
                let kd = compression_tokens_factor(k, a.a)?;
                let cost = compression_cost(k, a.a)?;
                let _ = writeln!(out, "{},{},{}", g17(k), g17(kd), g17(cost));
            }
            emit(&a.out, &out)?;
        }
        Command::Fit(a) => {
            let (_, entries) = Manifest::load(&a.manifest)?;
            let mut corpus = Vec::with_capacity(entries.len());
            let mut hasher = Sha256::new();
            for e in &entries {
                let smoothed = smooth(&e.curve, window, e.config.as_ref())?;
                let normalized = normalize_final_with_offset(&smoothed, 0.0)
                    .with_context(|| format!("normalizing run {}", e.run_id))?;
                hasher.update(e.run_id.as_bytes());
                hasher.update(b"\n");
                hasher.update(normalized.to_csv().as_bytes());
                hasher.update(serde_json::to_string(&e.meta)?.as_bytes());
                corpus.push((normalized, e.meta.clone()));
            }
            let grid = match a.grid {
                Some(g) => FitGrid::with_resolution(g)?,
                None => FitGrid::default(),
            };
            let init = PredictorParams {
                m: a.m,
                eps1: a.eps1,
                eps2: a.eps2,
                b_const: 1.0,
                b_exp: 0.0,
                q_const: 1.0,
                q_exp: 0.0,
            };
            let report = fit_alternating(&corpus, &init, &grid, a.max_rounds)?;
            log::info!("fit converged after {} rounds, macro MAE {}", report.rounds, report.macro_mae);
            let artifact = FitArtifact::new(&report.params, hex::encode(hasher.finalize()), report.macro_mae);
            emit(&a.out, &(serde_json::to_string_pretty(&artifact)? + "\n"))?;
        }
        Command::Predict(a) => {
            let params = FitArtifact::load(&a.fit)?.params();
            let meta = CurveMeta::new(a.tau, a.tpp, parse_schedule(&a.schedule)?);
            if a.points < 2 {
                bail!("--points must be at least 2");
            }
            let grid = linspace(0.0, 1.0, a.points);
            let values = predict_curve(&params, &meta, &grid)?;
            let mut out = String::from("t_hat,ell_hat\n");
            for (t, v) in grid.iter().zip(values) {
                let _ = writeln!(out, "{},{}", g17(*t), g17(v));
            }
            emit(&a.out, &out)?;
        }
        Command::Rank(a) => {
            let params = FitArtifact::load(&a.fit)?.params();
            let strategy: Strategy = a.strategy.parse()?;
            let (_, entries) = Manifest::load(&a.manifest)?;
            let opts = stop_options(window, &entries)?;
            let sweep: Vec<SweepEntry> = entries.iter().map(sweep_entry).collect();
            let d = decide_with(&sweep, strategy, &params, cli.seed, &opts)?;
            if d.fell_back {
                eprintln!("warning: stop fraction {} below {}; ranked by current loss", d.stop_fraction, opts.min_stop);
            }
            let out = json!({
                "chosen": d.chosen_run_id,
                "predicted_finals": d.predicted_finals,
                "stop_fraction": d.stop_fraction,
                "strategy": d.strategy,
            });
            emit(&a.out, &(serde_json::to_string_pretty(&out)? + "\n"))?;
        }
        Command::Evalstop(a) => {
            let params = FitArtifact::load(&a.fit)?.params();
            let (_, entries) = Manifest::load(&a.manifest)?;
            let opts = stop_options(window, &entries)?;
            let sweep: Vec<SweepEntry> = entries.iter().map(sweep_entry).collect();
            let stops = parse_list(&a.stops)?;
            let strategies: Vec<Strategy> =
                a.strategies.split(',').map(|s| s.trim().parse()).collect::<collapsekit::Result<_>>()?;
            let seeds: Vec<u64> = (0..a.random_draws).map(|i| cli.seed.wrapping_add(i)).collect();
            let mut out = String::from("stop_frac,strategy,gap\n");
            for s in strategies {
                for g in evaluate_strategy_with(&sweep, s, &stops, &params, &seeds, &opts)? {
                    let _ = writeln!(out, "{},{},{}", g17(g.stop_fraction), g.strategy, g17(g.gap));
                }
            }
            emit(&a.out, &out)?;
        }
        Command::Monitor(a) => {
            let config = RunConfig::load(&a.config)?;
            let mut policy = match &a.policy {
                Some(p) => MonitorPolicy::load(p)?,
                None => MonitorPolicy::default(),
            };
            policy.smooth_steps = window.steps(config.batch_tokens)?;
            policy.validate()?;
            let reference = match (&a.reference, &a.reference_manifest) {
                (Some(p), _) => load_reference(p)?,
                (None, Some(m)) => band_reference(m, window)?,
                (None, None) => bail!("pass --reference or --reference-manifest"),
            };
            let options = WatchOptions {
                poll_interval: Duration::from_millis(a.poll_ms),
                timeout: a.timeout_ms.map(Duration::from_millis),
            };
            let mut sink = Sink::open(&a.out)?;
            let mut alerts = 0usize;
            let mut failure = None;
            watch(&a.log, &reference, &config, &policy, options, |e| {
                if matches!(e, MonitorEvent::Alert { .. }) {
                    alerts += 1;
                }
                if failure.is_none() {
                    let line = serde_json::to_string(e).expect("event serializes");
                    if let Err(err) = sink.line(&line) {
                        failure = Some(err);
                    }
                }
            })?;
            if let Some(err) = failure {
                return Err(err);
            }
            sink.finish()?;
            if alerts > 0 {
                eprintln!("{alerts} alert(s) raised");
                return Ok(2);
            }
        }
        Command::Synth(a) => {
            let spec = SynthSpec::load(&a.spec)?;
            let output = synth::generate(&spec)?;
            let mut written = synth::write_output(&output, &a.out)?;
            if let Some(manifest) = synth_manifest(&output) {
                let path = a.out.join("manifest.json");
                std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
                written.push(path);
            }
            for p in written {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::Tau(a) => {
            let config = RunConfig::load(&a.config)?;
            let summary = tau(&config)?;
            let mut out = serde_json::to_value(summary)?;
            if let Some(at) = &a.at {
                let points: Vec<serde_json::Value> = parse_list(at)?
                    .into_iter()
                    .map(|t| Ok(json!({ "t_hat": t, "tau_t": instantaneous_tau(&config, t)? })))
                    .collect::<Result<_>>()?;
                out["instantaneous"] = json!(points);
            }
            emit(&a.out, &(serde_json::to_string_pretty(&out)? + "\n"))?;
        }
    }
    Ok(0)
}

fn parse_smooth_window(s: &str) -> Result<SmoothWindow> {
    let s = s.trim();
    let (digits, tokens) = match s.strip_suffix("tokens").or_else(|| s.strip_suffix("tok")) {
        Some(d) => (d, true),
        None => (s, false),
    };
    let n: u64 = digits.trim().parse().with_context(|| format!("invalid --smooth-window {s:?}"))?;
    if n == 0 {
        bail!("--smooth-window must be positive");
    }
    Ok(if tokens { SmoothWindow::Tokens(n) } else { SmoothWindow::Steps(n) })
}

fn smooth(curve: &LossCurve, window: SmoothWindow, config: Option<&RunConfig>) -> Result<LossCurve> {
    let steps = match (window, config) {
        (SmoothWindow::Steps(s), _) => s,
        (SmoothWindow::Tokens(_), Some(c)) => window.steps(c.batch_tokens)?,
        (SmoothWindow::Tokens(_), None) => bail!("a token smoothing window needs a run config"),
    };
    Ok(curve.smooth(steps)?)
}

fn stop_options(window: SmoothWindow, entries: &[LoadedEntry]) -> Result<EarlyStopOptions> {
    let smooth_steps = match window {
        SmoothWindow::Steps(s) => s,
        SmoothWindow::Tokens(_) => {
            let cfg =
                entries.iter().find_map(|e| e.config.as_ref()).context("a token smoothing window needs run configs")?;
            window.steps(cfg.batch_tokens)?
        }
    };
    Ok(EarlyStopOptions { smooth_steps, ..Default::default() })
}

fn sweep_entry(e: &LoadedEntry) -> SweepEntry {
    SweepEntry { run_id: e.run_id.clone(), partial: e.curve.clone(), meta: e.meta.clone(), true_final: e.true_final }
}

/// `constant`, `d2z`, `d2z:<warmup>`, `linear:<warmup>:<ratio>`, or a JSON file.
fn parse_schedule(s: &str) -> Result<LrSchedule> {
    let schedule = if s.ends_with(".json") {
        read_json(Path::new(s))?
    } else {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts.get(i).map_or(Ok(0.0), |p| p.parse().with_context(|| format!("invalid number in schedule {s:?}")))
        };
        match parts[0] {
            "constant" if parts.len() == 1 => LrSchedule::constant(),
            "d2z" if parts.len() <= 2 => LrSchedule::decay_to_zero(num(1)?),
            "linear" if parts.len() == 3 => LrSchedule::linear_decay(num(1)?, num(2)?),
            _ => bail!("invalid schedule {s:?}; expected constant, d2z[:warmup], linear:warmup:ratio or a .json file"),
        }
    };
    schedule.validate()?;
    Ok(schedule)
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|x| x.trim().parse::<f64>().with_context(|| format!("invalid number {x:?}"))).collect()
}

fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        bail!("--sweep expects lo:hi:n");
    }
    let lo: f64 = parts[0].parse().context("invalid sweep lower bound")?;
    let hi: f64 = parts[1].parse().context("invalid sweep upper bound")?;
    let n: usize = parts[2].parse().context("invalid sweep count")?;
    if n == 0 {
        bail!("--sweep count must be positive");
    }
    Ok(if n == 1 { vec![lo] } else { linspace(lo, hi, n) })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_reference(path: &Path) -> Result<NormalizedCurve> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    NormalizedCurve::from_csv(&text).with_context(|| format!("parsing normalized curve {}", path.display()))
}

/// The completed run with the fewest parameters, smoothed and divided by its final loss.
fn band_reference(path: &Path, window: SmoothWindow) -> Result<NormalizedCurve> {
    let (_, entries) = Manifest::load(path)?;
    let pick = entries
        .iter()
        .filter(|e| e.curve.complete())
        .min_by_key(|e| e.config.as_ref().map_or(u64::MAX, |c| c.params))
        .ok_or_else(|| anyhow!("no completed run in {}", path.display()))?;
    log::info!("reference run {}", pick.run_id);
    let smoothed = smooth(&pick.curve, window, pick.config.as_ref())?;
    Ok(normalize_final_with_offset(&smoothed, 0.0)?)
}

fn synth_manifest(output: &synth::SynthOutput) -> Option<Manifest> {
    if output.runs.is_empty() || output.runs.iter().any(|r| r.meta.is_none()) {
        return None;
    }
    let entries = output
        .runs
        .iter()
        .map(|r| {
            let id = r.curve.run_id().to_string();
            let meta = r.meta.clone().expect("checked above");
            let true_final = output.truth["finals"][&id].as_f64().or_else(|| {
                (output.truth["kind"] == "predictor_curve").then(|| output.truth["final_loss"].as_f64()).flatten()
            });
            ManifestEntry {
                curve_path: format!("{id}.jsonl").into(),
                config_path: r.config.as_ref().map(|_| format!("{id}.config.json").into()),
                run_id: Some(id),
                total_steps: None,
                meta: MetaOverrides { tau: Some(meta.tau), tpp: Some(meta.tpp), schedule: Some(meta.schedule) },
                true_final,
            }
        })
        .collect();
    Some(Manifest { band_id: None, entries })
}

fn emit(out: &str, text: &str) -> Result<()> {
    let mut sink = Sink::open(out)?;
    sink.write(text)?;
    sink.finish()
}

/// `-` is stdout; anything else is a file path.
enum Sink {
    Stdout(std::io::Stdout),
    File(std::io::BufWriter<std::fs::File>),
}

impl Sink {
    fn open(out: &str) -> Result<Self> {
        Ok(if out == "-" {
            Sink::Stdout(std::io::stdout())
        } else {
            let f = std::fs::File::create(out).with_context(|| format!("creating {out}"))?;
            Sink::File(std::io::BufWriter::new(f))
        })
    }

    fn write(&mut self, text: &str) -> Result<()> {
        match self {
            Sink::Stdout(s) => s.lock().write_all(text.as_bytes())?,
            Sink::File(f) => f.write_all(text.as_bytes())?,
        }
        Ok(())
    }

    fn line(&mut self, text: &str) -> Result<()> {
        self.write(text)?;
        self.write("\n")?;
        if let Sink::Stdout(s) = self {
            s.lock().flush()?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        match self {
            Sink::Stdout(s) => s.lock().flush()?,
            Sink::File(f) => f.flush()?,
        }
        Ok(())
    }
}
