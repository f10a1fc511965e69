//! Experiment configuration files (TOML) with dotted-key overrides.
//!
//! ```toml
//! experiment = "cti-event"
//! seeds = [1, 2, 3, 4, 5]
//! dataset = "dataset.jsonl"
//! manifest = "splits.json"
//!
//! [[plan.stages]]
//! level = 0
//! kind = "pretrained"
//!
//! [[plan.stages]]
//! level = 3
//! kind = "fewshot"
//! dataset = "split:fewshot_train"
//! objective = "adapet"
//! ```
//!
//! A file whose top level has `stages` is read as a bare plan.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalharness::AugmentationSetup;
use crate::pipeline::{DatasetRef, PipelinePlan};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("override {0:?} is not of the form key.path=value")]
    BadOverride(String),
    #[error("override {key:?}: {message}")]
    OverridePath { key: String, message: String },
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_experiment() -> String {
    "experiment".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_experiment")]
    pub experiment: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Labeled dataset; defaults to `<data-dir>/dataset.jsonl`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Split manifest; defaults to `<data-dir>/splits.json` when that exists.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    pub plan: PipelinePlan,
    #[serde(default)]
    pub augmentation: Option<AugmentationSetup>,
}

impl ExperimentConfig {
    pub fn new(plan: PipelinePlan) -> Self {
        Self {
            experiment: default_experiment(),
            seeds: default_seeds(),
            dataset: None,
            manifest: None,
            plan,
            augmentation: None,
        }
    }

    fn rebase(&mut self, base: &Path) {
        for p in [&mut self.dataset, &mut self.manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for s in &mut self.plan.stages {
            for r in [&mut s.dataset, &mut s.eval].into_iter().flatten() {
                r.rebase(base);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Splits `key.path=value`. The value is read as a TOML literal when it
/// parses as one and as a plain string otherwise.
pub fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value), ConfigError> {
    let (key, raw) = s.split_once('=').ok_or_else(|| ConfigError::BadOverride(s.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::BadOverride(s.to_string()));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

/// Sets `path` inside `root`, creating tables on the way. Numeric segments
/// index into existing arrays.
pub fn apply_override(root: &mut toml::Value, path: &[String], value: toml::Value) -> Result<(), ConfigError> {
    let key = path.join(".");
    let err = |message: String| ConfigError::OverridePath { key: key.clone(), message };
    let mut cur = root;
    for (i, seg) in path.iter().enumerate() {
        let last = i + 1 == path.len();
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert(seg.clone(), value);
                    return Ok(());
                }
                t.entry(seg.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = seg.parse().map_err(|_| err(format!("{seg:?} is not an array index")))?;
                let len = a.len();
                let slot = a.get_mut(idx).ok_or_else(|| err(format!("index {idx} out of range (length {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(err(format!("{seg:?} is below a scalar"))),
        };
    }
    Ok(())
}

/// Reads a config (or bare plan) file, applies `overrides` in order and
/// validates the result. Relative paths are resolved against the file's
/// directory.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, overrides, path, base)
}

pub fn parse_config(text: &str, overrides: &[String], origin: &Path, base: &Path) -> Result<ExperimentConfig, ConfigError> {
    let parse_err = |message: String| ConfigError::Parse { path: origin.into(), message };
    let mut root: toml::Value = toml::from_str::<toml::Table>(text).map(toml::Value::Table).map_err(|e| parse_err(e.to_string()))?;
    if root.get("stages").is_some() {
        let mut wrapped = toml::Table::new();
        wrapped.insert("plan".into(), root);
        root = toml::Value::Table(wrapped);
    }
    for o in overrides {
        let (key, value) = parse_override(o)?;
        apply_override(&mut root, &key, value)?;
    }
    let mut cfg: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
    cfg.rebase(base);
    Ok(cfg)
}

/// Resolves the dataset reference for display and validation.
pub fn describe_refs(cfg: &ExperimentConfig) -> Vec<String> {
    cfg.plan
        .stages
        .iter()
        .flat_map(|s| [s.dataset.as_ref(), s.eval.as_ref()])
        .flatten()
        .map(DatasetRef::to_string)
        .collect()
}
