//! Corpus manifests: curve logs plus run configs or explicit metadata.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use collapsekit::curve::{ingest, LogFormat};
use collapsekit::timescale::tau;
use collapsekit::{CurveMeta, LossCurve, LrSchedule, RunConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tpp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<LrSchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub curve_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    /// Needed when there is no config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<u64>,
    #[serde(default)]
    pub meta: MetaOverrides,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_final: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_id: Option<String>,
    pub entries: Vec<ManifestEntry>,
}

/// A manifest entry with its files loaded. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone)]
pub struct LoadedEntry {
    pub run_id: String,
    pub curve: LossCurve,
    pub config: Option<RunConfig>,
    pub meta: CurveMeta,
    pub true_final: Option<f64>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<(Self, Vec<LoadedEntry>)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let manifest: Manifest =
            serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        if manifest.entries.is_empty() {
            bail!("manifest {} has no entries", path.display());
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut seen = BTreeSet::new();
        let mut loaded = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let entry = load_entry(e, base)?;
            if !seen.insert(entry.run_id.clone()) {
                bail!("duplicate run_id {:?} in manifest", entry.run_id);
            }
            loaded.push(entry);
        }
        Ok((manifest, loaded))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_entry(e: &ManifestEntry, base: &Path) -> Result<LoadedEntry> {
    let curve_path = resolve(base, &e.curve_path);
    if !curve_path.exists() {
        bail!("curve file {} does not exist", curve_path.display());
    }
    let config = match &e.config_path {
        Some(p) => {
            let p = resolve(base, p);
            Some(RunConfig::load(&p).with_context(|| format!("loading config {}", p.display()))?)
        }
        None => None,
    };
    let run_id = e
        .run_id
        .clone()
        .or_else(|| config.as_ref().map(|c| c.run_id.clone()).filter(|s| !s.is_empty()))
        .unwrap_or_else(|| curve_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let curve = ingest(&curve_path, LogFormat::from_path(&curve_path), run_id.clone(), e.total_steps, config.as_ref())
        .with_context(|| format!("ingesting {}", curve_path.display()))?;
    let meta = entry_meta(&e.meta, config.as_ref()).with_context(|| format!("metadata for run {run_id}"))?;
    Ok(LoadedEntry { run_id, curve, config, meta, true_final: e.true_final })
}

/// Metadata from the config, with explicit overrides taking precedence.
pub fn entry_meta(overrides: &MetaOverrides, config: Option<&RunConfig>) -> Result<CurveMeta> {
    let from_config = match config {
        Some(c) => Some((tau(c)?.tau, c.tpp(), c.schedule)),
        None => None,
    };
    let pick = |o: Option<f64>, c: Option<f64>, name: &str| -> Result<f64> {
        o.or(c).with_context(|| format!("{name} missing: no override and no config"))
    };
    let meta = CurveMeta::new(
        pick(overrides.tau, from_config.map(|c| c.0), "tau")?,
        pick(overrides.tpp, from_config.map(|c| c.1), "tpp")?,
        overrides.schedule.or(from_config.map(|c| c.2)).unwrap_or_default(),
    );
    meta.validate()?;
    Ok(meta)
}
