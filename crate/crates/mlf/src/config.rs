//! Run configuration: JSON on disk, `key=value` overrides, validation.

use std::path::{Path, PathBuf};

use mlf_core::data::SplitScheme;
use mlf_core::{MlfConfig, MlfError};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AppError, Result};
use crate::synth::SynthSpec;

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "MLF_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv { path: PathBuf },
    Synth(SynthSpec),
}

fn d_eval_batch() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    /// Random subset of training windows drawn afresh each epoch.
    #[serde(default)]
    pub max_train_windows: Option<usize>,
    /// Evenly spaced subset of validation/test windows.
    #[serde(default)]
    pub max_eval_windows: Option<usize>,
    #[serde(default = "d_eval_batch")]
    pub eval_batch_size: usize,
    /// Stop after this many epochs without validation improvement.
    #[serde(default)]
    pub patience: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_train_windows: None,
            max_eval_windows: None,
            eval_batch_size: d_eval_batch(),
            patience: None,
        }
    }
}

fn d_output() -> PathBuf {
    PathBuf::from("runs/latest")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitScheme,
    pub model: MlfConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub train: TrainOptions,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| match e {
            MlfError::InvalidConfig { field, reason } => AppError::Config {
                field: format!("model.{field}"),
                reason,
            },
            other => other.into(),
        })?;
        if self.train.eval_batch_size == 0 {
            return Err(AppError::Config {
                field: "train.eval_batch_size".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// Sets `path` (dot separated) inside a JSON object, creating objects on
/// the way. The value is parsed as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| AppError::Usage(format!("override '{assignment}' is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(AppError::Usage(format!("empty key segment in '{key}'")));
        }
        if !node.is_object() {
            return Err(AppError::Config {
                field: parts[..i].join("."),
                reason: "is not an object".into(),
            });
        }
        let obj = node.as_object_mut().expect("checked");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Deserialises with the failing field path in the error.
pub fn from_value(value: Value) -> Result<RunConfig> {
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        AppError::Config {
            field: if field == "." { "<root>".into() } else { field },
            reason: e.into_inner().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file, applies overrides and the output-dir environment
/// override, and makes a relative CSV path absolute against the config's
/// directory.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| AppError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let mut cfg = from_value(value)?;
    if let DataSource::Csv { path: p } = &mut cfg.data {
        if p.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            *p = absolute(&base.join(&*p));
        }
    }
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    Ok(cfg)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}
