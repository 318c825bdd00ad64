//! Loss-curve storage: ingestion, validation, smoothing and resampling.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::fmt::g17;
use crate::stats::compensated_sum;
use crate::timescale::LrSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub step: u64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "tokens")]
    pub tokens_seen: Option<u64>,
}

impl LossSample {
    pub fn new(step: u64, loss: f64) -> Self {
        Self { step, loss, tokens_seen: None }
    }
}

/// A labelled position on the step axis, e.g. a restart boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub step: u64,
    pub label: String,
}

pub const RESTART_LABEL: &str = "restart";

/// An immutable, validated loss trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    run_id: String,
    total_steps: u64,
    samples: Vec<LossSample>,
    annotations: Vec<Annotation>,
}

impl LossCurve {
    /// Validates samples: nonempty, finite positive losses, strictly increasing
    /// steps, last step at most `total_steps`.
    pub fn new(run_id: impl Into<String>, samples: Vec<LossSample>, total_steps: u64) -> Result<Self> {
        Self::with_annotations(run_id, samples, total_steps, Vec::new())
    }

    pub fn with_annotations(
        run_id: impl Into<String>,
        samples: Vec<LossSample>,
        total_steps: u64,
        annotations: Vec<Annotation>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        if total_steps == 0 {
            return Err(invalid_arg("total steps must be positive"));
        }
        for (row, s) in samples.iter().enumerate() {
            if !(s.loss > 0.0) || !s.loss.is_finite() {
                return Err(Error::InvalidLoss { row, loss: s.loss });
            }
        }
        for (row, w) in samples.windows(2).enumerate() {
            if w[1].step <= w[0].step {
                return Err(Error::NonMonotoneStep { row: row + 1, step: w[1].step, previous: w[0].step });
            }
        }
        let last = samples.last().expect("nonempty").step;
        if last > total_steps {
            return Err(invalid_arg(format!("last step {last} exceeds total steps {total_steps}")));
        }
        Ok(Self { run_id: run_id.into(), total_steps, samples, annotations })
    }

    /// Builds a curve from `(step, loss)` rows in log order. A row whose step
    /// was already seen is treated as a restart: samples from that step on are
    /// dropped, the new row kept, and a restart annotation recorded. A step
    /// that is smaller than its predecessor but never seen before is an error.
    pub fn from_log_rows(run_id: impl Into<String>, rows: Vec<LossSample>, total_steps: u64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut samples: Vec<LossSample> = Vec::with_capacity(rows.len());
        let mut annotations = Vec::new();
        for (row, s) in rows.into_iter().enumerate() {
            if !(s.loss > 0.0) || !s.loss.is_finite() {
                return Err(Error::InvalidLoss { row, loss: s.loss });
            }
            match samples.last() {
                Some(prev) if s.step <= prev.step => match samples.binary_search_by(|p| p.step.cmp(&s.step)) {
                    Ok(pos) => {
                        samples.truncate(pos);
                        if annotations.last().map(|a: &Annotation| a.step) != Some(s.step) {
                            annotations.push(Annotation { step: s.step, label: RESTART_LABEL.into() });
                        }
                    }
                    Err(_) => return Err(Error::NonMonotoneStep { row, step: s.step, previous: prev.step }),
                },
                _ => {}
            }
            samples.push(s);
        }
        annotations.retain(|a| samples.iter().any(|s| s.step == a.step));
        Self::with_annotations(run_id, samples, total_steps, annotations)
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn samples(&self) -> &[LossSample] {
        &self.samples
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// True iff the last sample sits at step `T`.
    pub fn complete(&self) -> bool {
        self.samples.last().map(|s| s.step) == Some(self.total_steps)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.loss).collect()
    }

    pub fn final_loss(&self) -> f64 {
        self.samples.last().expect("nonempty").loss
    }

    pub fn t_hat_of(&self, step: u64) -> f64 {
        step as f64 / self.total_steps as f64
    }

    pub fn first_t_hat(&self) -> f64 {
        self.t_hat_of(self.samples[0].step)
    }

    pub fn last_t_hat(&self) -> f64 {
        self.t_hat_of(self.samples.last().expect("nonempty").step)
    }

    /// Returns a copy with losses replaced, keeping steps, tokens and annotations.
    pub fn with_losses(&self, losses: &[f64]) -> Result<Self> {
        if losses.len() != self.samples.len() {
            return Err(invalid_arg("loss vector length does not match curve"));
        }
        let samples = self.samples.iter().zip(losses).map(|(s, &loss)| LossSample { loss, ..*s }).collect();
        Self::with_annotations(self.run_id.clone(), samples, self.total_steps, self.annotations.clone())
    }

    /// Keeps samples with `t̂ ≤ stop`.
    pub fn truncate_at(&self, stop: f64) -> Result<Self> {
        let samples: Vec<LossSample> = self.samples.iter().copied().filter(|s| self.t_hat_of(s.step) <= stop).collect();
        let last = samples.last().map(|s| s.step).unwrap_or(0);
        let annotations = self.annotations.iter().filter(|a| a.step <= last).cloned().collect();
        Self::with_annotations(self.run_id.clone(), samples, self.total_steps, annotations)
    }

    /// Trailing moving average over `window_steps` optimizer steps: each
    /// output is the mean of the samples whose step lies in
    /// `(step - window_steps, step]`.
    pub fn smooth(&self, window_steps: u64) -> Result<Self> {
        if window_steps == 0 {
            return Err(invalid_arg("smoothing window must be at least one step"));
        }
        let mut out = Vec::with_capacity(self.samples.len());
        let mut lo = 0usize;
        for (i, s) in self.samples.iter().enumerate() {
            while self.samples[lo].step + window_steps <= s.step {
                lo += 1;
            }
            let window = &self.samples[lo..=i];
            let mean = if window.len() == 1 {
                window[0].loss
            } else {
                compensated_sum(window.iter().map(|w| w.loss)) / window.len() as f64
            };
            out.push(mean);
        }
        self.with_losses(&out)
    }

    /// Smoothing with a window given in steps or in tokens.
    pub fn smooth_with(&self, window: SmoothWindow, batch_tokens: u64) -> Result<Self> {
        self.smooth(window.steps(batch_tokens)?)
    }

    /// `(t̂, loss)` pairs with `t̂ = step / T`.
    pub fn training_fraction(&self) -> Vec<(f64, f64)> {
        self.samples.iter().map(|s| (self.t_hat_of(s.step), s.loss)).collect()
    }

    /// Linear interpolation at each grid point. Grid points that coincide with
    /// a sample's `t̂` return that sample's loss bit-for-bit.
    pub fn resample(&self, grid: &[f64]) -> Result<Vec<f64>> {
        interpolate(&self.training_fraction(), grid)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let with_tokens = self.samples.iter().any(|s| s.tokens_seen.is_some());
        let mut out = String::from(if with_tokens { "step,loss,tokens\n" } else { "step,loss\n" });
        for s in &self.samples {
            out.push_str(&s.step.to_string());
            out.push(',');
            out.push_str(&g17(s.loss));
            if with_tokens {
                out.push(',');
                if let Some(t) = s.tokens_seen {
                    out.push_str(&t.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path, format: LogFormat) -> Result<()> {
        let text = match format {
            LogFormat::Jsonl => self.to_jsonl(),
            LogFormat::Csv => self.to_csv(),
        };
        let mut f = fs::File::create(path)?;
        f.write_all(text.as_bytes())?;
        Ok(())
    }
}

/// Piecewise-linear interpolation of `points` (sorted by abscissa).
pub fn interpolate(points: &[(f64, f64)], grid: &[f64]) -> Result<Vec<f64>> {
    let (Some(first), Some(last)) = (points.first(), points.last()) else {
        return Err(Error::EmptyInput);
    };
    grid.iter()
        .map(|&x| {
            if !(x >= first.0 && x <= last.0) {
                return Err(Error::Coverage(format!("t_hat {x} outside covered range [{}, {}]", first.0, last.0)));
            }
            let idx = points.partition_point(|p| p.0 < x);
            let hi = points[idx];
            if hi.0 == x {
                return Ok(hi.1);
            }
            let lo = points[idx - 1];
            let w = (x - lo.0) / (hi.0 - lo.0);
            Ok(lo.1 + (hi.1 - lo.1) * w)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Jsonl,
    Csv,
}

impl LogFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => LogFormat::Csv,
            _ => LogFormat::Jsonl,
        }
    }
}

impl std::str::FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" => Ok(LogFormat::Jsonl),
            "csv" => Ok(LogFormat::Csv),
            other => Err(invalid_arg(format!("unknown log format {other:?}"))),
        }
    }
}

/// Smoothing window expressed in optimizer steps or in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothWindow {
    Steps(u64),
    Tokens(u64),
}

impl SmoothWindow {
    pub const DEFAULT_STEPS: u64 = 100;

    /// Converts to steps; a token window rounds to the nearest whole step (at least one).
    pub fn steps(self, batch_tokens: u64) -> Result<u64> {
        match self {
            SmoothWindow::Steps(0) => Err(invalid_arg("smoothing window must be at least one step")),
            SmoothWindow::Steps(s) => Ok(s),
            SmoothWindow::Tokens(t) => {
                if batch_tokens == 0 {
                    return Err(invalid_arg("batch_tokens must be positive"));
                }
                Ok(((t as f64 / batch_tokens as f64).round() as u64).max(1))
            }
        }
    }
}

impl Default for SmoothWindow {
    fn default() -> Self {
        SmoothWindow::Steps(Self::DEFAULT_STEPS)
    }
}

/// Parses raw log rows without curve-level validation.
pub fn parse_rows(text: &str, format: LogFormat) -> Result<Vec<LossSample>> {
    match format {
        LogFormat::Jsonl => parse_jsonl(text),
        LogFormat::Csv => parse_csv(text),
    }
}

fn parse_jsonl(text: &str) -> Result<Vec<LossSample>> {
    #[derive(Deserialize)]
    struct Row {
        step: u64,
        loss: Option<f64>,
        tokens: Option<u64>,
    }
    let mut rows = Vec::new();
    for (row, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let r: Row = serde_json::from_str(line).map_err(|e| Error::Parse { row, message: e.to_string() })?;
        // JSON has no literal for NaN/inf; serializers write null instead.
        let loss = r.loss.unwrap_or(f64::NAN);
        if !(loss > 0.0) || !loss.is_finite() {
            return Err(Error::InvalidLoss { row, loss });
        }
        rows.push(LossSample { step: r.step, loss, tokens_seen: r.tokens });
    }
    Ok(rows)
}

fn parse_csv(text: &str) -> Result<Vec<LossSample>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or(Error::EmptyInput)?;
    let cols: Vec<String> = header.split(',').map(|c| c.trim().to_ascii_lowercase()).collect();
    let find = |name: &str| cols.iter().position(|c| c == name);
    let step_col = find("step").ok_or_else(|| Error::Parse { row: 0, message: "missing 'step' column".into() })?;
    let loss_col = find("loss").ok_or_else(|| Error::Parse { row: 0, message: "missing 'loss' column".into() })?;
    let tokens_col = find("tokens");
    let mut rows = Vec::new();
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |i: usize| {
            fields.get(i).copied().ok_or_else(|| Error::Parse { row, message: format!("missing column {i}") })
        };
        let step = get(step_col)?.parse::<u64>().map_err(|e| Error::Parse { row, message: format!("step: {e}") })?;
        let loss = get(loss_col)?.parse::<f64>().map_err(|e| Error::Parse { row, message: format!("loss: {e}") })?;
        if !(loss > 0.0) || !loss.is_finite() {
            return Err(Error::InvalidLoss { row, loss });
        }
        let tokens_seen = match tokens_col.and_then(|i| fields.get(i)).filter(|f| !f.is_empty()) {
            Some(t) => Some(t.parse::<u64>().map_err(|e| Error::Parse { row, message: format!("tokens: {e}") })?),
            None => None,
        };
        rows.push(LossSample { step, loss, tokens_seen });
    }
    Ok(rows)
}

/// Reads and validates a loss log. `total_steps` defaults to the config's
/// `D / B`; one of the two must be available.
pub fn ingest(
    path: &Path,
    format: LogFormat,
    run_id: impl Into<String>,
    total_steps: Option<u64>,
    config: Option<&RunConfig>,
) -> Result<LossCurve> {
    let text = fs::read_to_string(path)?;
    ingest_str(&text, format, run_id, total_steps, config)
}

pub fn ingest_str(
    text: &str,
    format: LogFormat,
    run_id: impl Into<String>,
    total_steps: Option<u64>,
    config: Option<&RunConfig>,
) -> Result<LossCurve> {
    let rows = parse_rows(text, format)?;
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total_steps = match (total_steps, config) {
        (Some(t), _) => t,
        (None, Some(c)) => c.total_steps()?,
        (None, None) => {
            return Err(Error::InvalidConfig("total steps unknown: no explicit T and no run config".into()))
        }
    };
    LossCurve::from_log_rows(run_id, rows, total_steps)
}

fn default_lr_adjust() -> f64 {
    1.0
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub run_id: String,
    /// Peak base learning rate.
    pub eta: f64,
    /// Width multiplier applied to `eta` (proxy width / target width).
    #[serde(default = "default_lr_adjust")]
    pub lr_adjust: f64,
    pub lambda: f64,
    pub batch_tokens: u64,
    pub dataset_tokens: u64,
    pub params: u64,
    pub schedule: LrSchedule,
    /// Accept `D` not divisible by `B` and round `T` down.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub allow_round_down: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !(self.lr_adjust > 0.0) {
            return Err(Error::InvalidConfig("eta and lr_adjust must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig("lambda must be nonnegative".into()));
        }
        if self.params == 0 {
            return Err(Error::InvalidConfig("params must be positive".into()));
        }
        self.schedule.validate()?;
        self.total_steps()?;
        Ok(())
    }

    pub fn adjusted_eta(&self) -> f64 {
        self.eta * self.lr_adjust
    }

    /// `T = D / B`.
    pub fn total_steps(&self) -> Result<u64> {
        if self.batch_tokens == 0 || self.dataset_tokens == 0 {
            return Err(Error::InvalidConfig("batch_tokens and dataset_tokens must be positive".into()));
        }
        let t = self.dataset_tokens / self.batch_tokens;
        if !self.dataset_tokens.is_multiple_of(self.batch_tokens) && !self.allow_round_down {
            return Err(Error::InvalidConfig(format!(
                "dataset_tokens {} is not a multiple of batch_tokens {}",
                self.dataset_tokens, self.batch_tokens
            )));
        }
        if t == 0 {
            return Err(Error::InvalidConfig("dataset smaller than one batch".into()));
        }
        Ok(t)
    }

    /// Tokens per parameter, `D / N`.
    pub fn tpp(&self) -> f64 {
        self.dataset_tokens as f64 / self.params as f64
    }
}
