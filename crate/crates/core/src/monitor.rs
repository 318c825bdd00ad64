//! Collapse-residual monitoring of a run against a reference normalized curve.
//!
//! A report is a pure function of the log contents, so tailing a log and
//! processing the finished file give bit-identical results.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::curve::{parse_rows, LogFormat, LossCurve, RunConfig};
use crate::error::{invalid_arg, Error, Result};
use crate::normalize::{
    align_normalizer, residuals, uniform_grid_within, Alert, AlignWindow, NormalizeMethod, NormalizedCurve,
    ResidualReport, DEFAULT_GRID_POINTS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorPolicy {
    /// Rolling-MAE level that raises an alert.
    pub threshold: f64,
    /// Rolling window width in training fraction.
    pub window_t_hat: f64,
    /// No alerts before this training fraction.
    pub min_t_hat: f64,
    /// Steps between alignment refreshes.
    pub realign_every: u64,
    pub align_window: AlignWindow,
    /// Trailing smoothing window in steps.
    pub smooth_steps: u64,
}

impl Default for MonitorPolicy {
    fn default() -> Self {
        Self {
            threshold: 0.01,
            window_t_hat: 0.02,
            min_t_hat: 0.5,
            realign_every: 500,
            align_window: AlignWindow::default(),
            smooth_steps: 100,
        }
    }
}

impl MonitorPolicy {
    pub fn validate(&self) -> Result<()> {
        self.align_window.validate()?;
        if !(self.threshold > 0.0) {
            return Err(invalid_arg("threshold must be positive"));
        }
        if !(self.window_t_hat > 0.0 && self.window_t_hat <= 0.5) {
            return Err(invalid_arg("window_t_hat must lie in (0, 0.5]"));
        }
        if !(self.min_t_hat >= self.align_window.hi) {
            return Err(invalid_arg(format!(
                "min_t_hat {} must be at least the alignment window end {}",
                self.min_t_hat, self.align_window.hi
            )));
        }
        if self.realign_every == 0 || self.smooth_steps == 0 {
            return Err(invalid_arg("realign_every and smooth_steps must be positive"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        p.validate()?;
        Ok(p)
    }
}

pub const UNALIGNED_LABEL: &str = "alignment window not covered";

/// The last step at which the normalizer was refreshed: the first step past
/// the alignment window, then every `realign_every` steps, at each restart,
/// and at the final step.
fn alignment_step(curve: &LossCurve, policy: &MonitorPolicy) -> Option<u64> {
    let total = curve.total_steps();
    let first = curve.samples().iter().map(|s| s.step).find(|&s| curve.t_hat_of(s) >= policy.align_window.hi)?;
    let last = curve.samples().last()?.step;
    if curve.complete() {
        return Some(total);
    }
    let mut at = first + (last - first) / policy.realign_every * policy.realign_every;
    for a in curve.annotations() {
        if a.step <= last && a.step > at && a.step >= first {
            at = a.step;
        }
    }
    Some(at)
}

/// Offline comparison of a (possibly partial) curve against a reference.
pub fn compare_offline(
    curve: &LossCurve,
    reference: &NormalizedCurve,
    policy: &MonitorPolicy,
) -> Result<ResidualReport> {
    policy.validate()?;
    if curve.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !reference.covers(policy.align_window.lo, 1.0) {
        let (a, b) = reference.coverage();
        return Err(Error::Coverage(format!(
            "reference covers [{a}, {b}], monitoring needs [{}, 1]",
            policy.align_window.lo
        )));
    }
    let smoothed = curve.smooth(policy.smooth_steps)?;
    let annotations: Vec<(f64, String)> =
        curve.annotations().iter().map(|a| (curve.t_hat_of(a.step), a.label.clone())).collect();

    let aligned = match alignment_step(&smoothed, policy) {
        Some(step) => {
            let upto = smoothed.truncate_at(smoothed.t_hat_of(step))?;
            if upto.first_t_hat() <= policy.align_window.lo {
                Some(align_normalizer(&upto, reference, policy.align_window)?)
            } else {
                None
            }
        }
        None => None,
    };
    let Some(normalizer) = aligned else {
        let mut annotations = annotations;
        if curve.complete() {
            log::warn!("run {} finished without covering the alignment window", curve.run_id());
            annotations.push((curve.last_t_hat(), UNALIGNED_LABEL.to_string()));
        }
        return Ok(ResidualReport { points: vec![], rolling_mae: vec![], alerts: vec![], annotations });
    };

    let normalized = NormalizedCurve::from_curve(&smoothed, normalizer, 0.0, NormalizeMethod::EarlyAlign)?;
    let (c0, c1) = normalized.coverage();
    let (r0, r1) = reference.coverage();
    let grid = uniform_grid_within(DEFAULT_GRID_POINTS, c0.max(r0), c1.min(r1));
    if grid.is_empty() {
        return Ok(ResidualReport { points: vec![], rolling_mae: vec![], alerts: vec![], annotations });
    }
    let mut report = residuals(&normalized, reference, &grid, policy.window_t_hat)?;
    report.alerts = detect_alerts(&report, policy);
    report.annotations = annotations;
    Ok(report)
}

/// Alert episodes: maximal runs of grid points at or after `min_t̂` whose
/// rolling MAE exceeds the threshold. The onset is the first grid point of
/// the trailing window that first crossed, but never before `min_t̂` or the
/// end of the previous episode.
fn detect_alerts(report: &ResidualReport, policy: &MonitorPolicy) -> Vec<Alert> {
    let pts = &report.points;
    let mut alerts = Vec::new();
    let mut floor = policy.min_t_hat;
    let mut i = 0;
    while i < pts.len() {
        let (t, v) = report.rolling_mae[i];
        if t < policy.min_t_hat || v <= policy.threshold {
            i += 1;
            continue;
        }
        let start = i;
        while i < pts.len() && report.rolling_mae[i].1 > policy.threshold {
            i += 1;
        }
        let window_start = t - policy.window_t_hat - 1e-12;
        let onset_idx = (0..=start).find(|&j| pts[j].0 >= window_start && pts[j].0 >= floor).unwrap_or(start);
        let peak =
            pts[onset_idx..i].iter().map(|p| p.1).fold(0.0f64, |acc, r| if r.abs() > acc.abs() { r } else { acc });
        alerts.push(Alert { onset: pts[onset_idx].0, peak });
        floor = pts[i - 1].0 + 1e-12;
    }
    alerts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MonitorEvent {
    Residual { t_hat: f64, value: f64 },
    Alert { t_hat: f64, value: f64 },
    Annotation { t_hat: f64, value: String },
}

/// Tails a log file, producing reports as rows arrive.
pub struct Watcher {
    path: PathBuf,
    format: LogFormat,
    run_id: String,
    total_steps: u64,
    reference: NormalizedCurve,
    policy: MonitorPolicy,
    emitted_t: f64,
    emitted_alerts: usize,
    emitted_annotations: usize,
    seen_file: bool,
    report: Option<ResidualReport>,
    curve: Option<LossCurve>,
}

impl Watcher {
    pub fn new(
        path: impl Into<PathBuf>,
        reference: NormalizedCurve,
        config: &RunConfig,
        policy: MonitorPolicy,
    ) -> Result<Self> {
        policy.validate()?;
        config.validate()?;
        let path = path.into();
        Ok(Self {
            format: LogFormat::from_path(&path),
            path,
            run_id: config.run_id.clone(),
            total_steps: config.total_steps()?,
            reference,
            policy,
            emitted_t: f64::NEG_INFINITY,
            emitted_alerts: 0,
            emitted_annotations: 0,
            seen_file: false,
            report: None,
            curve: None,
        })
    }

    /// Re-reads the log and returns events not emitted before. Rows after the
    /// last newline are treated as still being written.
    pub fn poll(&mut self) -> Result<Vec<MonitorEvent>> {
        let text = match std::fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                if self.seen_file {
                    return Err(Error::LogDisappeared(self.path.display().to_string()));
                }
                return Ok(vec![]);
            }
            Err(e) => return Err(e.into()),
        };
        self.seen_file = true;
        let complete_text = match text.rfind('\n') {
            Some(i) => &text[..=i],
            None => "",
        };
        let rows = parse_rows(complete_text, self.format)?;
        if rows.is_empty() {
            return Ok(vec![]);
        }
        let curve = LossCurve::from_log_rows(self.run_id.clone(), rows, self.total_steps)?;
        let report = compare_offline(&curve, &self.reference, &self.policy)?;

        let mut events = Vec::new();
        for (t, label) in report.annotations.iter().skip(self.emitted_annotations) {
            events.push(MonitorEvent::Annotation { t_hat: *t, value: label.clone() });
        }
        self.emitted_annotations = self.emitted_annotations.max(report.annotations.len());
        let since = self.emitted_t;
        for &(t, v) in report.points.iter().filter(|p| p.0 > since) {
            events.push(MonitorEvent::Residual { t_hat: t, value: v });
            self.emitted_t = t;
        }
        for a in report.alerts.iter().skip(self.emitted_alerts) {
            events.push(MonitorEvent::Alert { t_hat: a.onset, value: a.peak });
        }
        self.emitted_alerts = self.emitted_alerts.max(report.alerts.len());
        self.report = Some(report);
        self.curve = Some(curve);
        Ok(events)
    }

    pub fn finished(&self) -> bool {
        self.curve.as_ref().is_some_and(LossCurve::complete)
    }

    pub fn alerts_emitted(&self) -> usize {
        self.emitted_alerts
    }

    pub fn report(&self) -> Option<&ResidualReport> {
        self.report.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WatchOptions {
    pub poll_interval: Duration,
    /// Give up after this long without the run completing.
    pub timeout: Option<Duration>,
}

impl Default for WatchOptions {
    fn default() -> Self {
        Self { poll_interval: Duration::from_millis(1000), timeout: None }
    }
}

/// Polls until the run reaches its final step, passing each event to `sink`.
/// Returns the final report.
pub fn watch(
    log_path: &Path,
    reference: &NormalizedCurve,
    config: &RunConfig,
    policy: &MonitorPolicy,
    options: WatchOptions,
    mut sink: impl FnMut(&MonitorEvent),
) -> Result<ResidualReport> {
    let mut watcher = Watcher::new(log_path, reference.clone(), config, *policy)?;
    let started = Instant::now();
    loop {
        for e in watcher.poll()? {
            sink(&e);
        }
        if watcher.finished() {
            break;
        }
        if options.timeout.is_some_and(|t| started.elapsed() >= t) {
            log::warn!("watch timed out before the run completed");
            break;
        }
        std::thread::sleep(options.poll_interval);
    }
    Ok(watcher.report.unwrap_or(ResidualReport {
        points: vec![],
        rolling_mae: vec![],
        alerts: vec![],
        annotations: vec![],
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::LossSample;
    use crate::normalize::normalize_final;

    const T: u64 = 10_000;

    fn shape(t: f64) -> f64 {
        1.0 + 0.6 * (-5.0 * t).exp() + 0.15 * (1.0 - t)
    }

    fn curve(scale: f64, ramp: Option<(f64, f64)>) -> LossCurve {
        let samples = (1..=T)
            .map(|s| {
                let t = s as f64 / T as f64;
                let extra = ramp.map_or(0.0, |(onset, slope)| if t > onset { slope * (t - onset) } else { 0.0 });
                LossSample::new(s, scale * (shape(t) + extra))
            })
            .collect();
        LossCurve::new("run", samples, T).unwrap()
    }

    fn reference() -> NormalizedCurve {
        normalize_final(&curve(1.0, None).smooth(100).unwrap()).unwrap()
    }

    #[test]
    fn clean_replay_is_silent() {
        let r = compare_offline(&curve(2.7, None), &reference(), &MonitorPolicy::default()).unwrap();
        assert!(r.alerts.is_empty());
        assert!(r.summary().max_abs < 1e-12);
    }

    #[test]
    fn ramp_alerts_near_onset() {
        let r = compare_offline(&curve(2.7, Some((0.6, 0.5))), &reference(), &MonitorPolicy::default()).unwrap();
        assert_eq!(r.alerts.len(), 1, "{:?}", r.alerts);
        let onset = r.alerts[0].onset;
        assert!((0.60..=0.65).contains(&onset), "onset {onset}");
        assert!(r.alerts[0].peak > 0.0);
    }

    #[test]
    fn higher_threshold_never_earlier() {
        let c = curve(2.7, Some((0.6, 0.5)));
        let mut last = 0.0;
        for th in [0.005, 0.01, 0.02, 0.04] {
            let p = MonitorPolicy { threshold: th, ..Default::default() };
            let r = compare_offline(&c, &reference(), &p).unwrap();
            let onset = r.alerts.first().map_or(f64::INFINITY, |a| a.onset);
            assert!(onset >= last);
            last = onset;
        }
    }

    #[test]
    fn no_alerts_before_min_t_hat() {
        let c = curve(2.7, Some((0.3, 1.0)));
        let r = compare_offline(&c, &reference(), &MonitorPolicy::default()).unwrap();
        assert!(r.alerts.iter().all(|a| a.onset >= 0.5));
    }

    #[test]
    fn partial_run_before_window_has_no_residuals() {
        let c = curve(2.7, None).truncate_at(0.4).unwrap();
        let r = compare_offline(&c, &reference(), &MonitorPolicy::default()).unwrap();
        assert!(r.points.is_empty() && r.alerts.is_empty());
    }

    #[test]
    fn policy_validation() {
        assert!(MonitorPolicy { min_t_hat: 0.4, ..Default::default() }.validate().is_err());
        assert!(MonitorPolicy { window_t_hat: 0.6, ..Default::default() }.validate().is_err());
        let p: MonitorPolicy = serde_json::from_str(r#"{"threshold": 0.02}"#).unwrap();
        assert_eq!(p.window_t_hat, 0.02);
    }

    #[test]
    fn watch_matches_offline_on_growing_log() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let full = curve(2.7, Some((0.6, 0.5)));
        let config = RunConfig {
            run_id: "run".into(),
            eta: 1e-3,
            lr_adjust: 1.0,
            lambda: 0.1,
            batch_tokens: 1000,
            dataset_tokens: 1000 * T,
            params: 1000,
            schedule: Default::default(),
            allow_round_down: false,
        };
        let mut w = Watcher::new(&path, reference(), &config, MonitorPolicy::default()).unwrap();
        assert!(w.poll().unwrap().is_empty());
        let mut alerts = 0;
        for stop in [0.3, 0.55, 0.7, 1.0] {
            full.truncate_at(stop).unwrap().write(&path, LogFormat::Jsonl).unwrap();
            alerts += w.poll().unwrap().iter().filter(|e| matches!(e, MonitorEvent::Alert { .. })).count();
        }
        assert!(w.finished());
        let offline = compare_offline(&full, &reference(), &MonitorPolicy::default()).unwrap();
        assert_eq!(w.report().unwrap(), &offline);
        assert_eq!(alerts, offline.alerts.len());
        std::fs::remove_file(&path).unwrap();
        assert!(matches!(w.poll(), Err(Error::LogDisappeared(_))));
    }
}
