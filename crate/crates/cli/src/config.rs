//! Config loading and `--set` overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use cfl_core::orchestrator::ExperimentConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

/// `key=value` with a dotted key path. The value is read as JSON when it
/// parses and as a plain string otherwise, so `strategy=random` and
/// `wireless.subchannels=4` both work.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl Override {
    pub fn new(key: &str, value: impl Into<Value>) -> Self {
        Self { key: key.to_string(), value: value.into() }
    }

    pub fn apply(&self, doc: &mut Value) -> Result<(), CliError> {
        let bad = |why: &str| CliError::Config(format!("override `{self}`: {why}"));
        let mut parts = self.key.split('.').peekable();
        let mut node = doc;
        while let Some(part) = parts.next() {
            if part.is_empty() {
                return Err(bad("empty key segment"));
            }
            if node.is_null() {
                *node = Value::Object(Map::new());
            }
            let obj = node.as_object_mut().ok_or_else(|| bad(&format!("`{part}` is inside a non-object value")))?;
            if parts.peek().is_none() {
                obj.insert(part.to_string(), self.value.clone());
                return Ok(());
            }
            node = obj.entry(part).or_insert(Value::Null);
        }
        Err(bad("empty key"))
    }
}

impl FromStr for Override {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (key, raw) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(format!("missing key in `{s}`"));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok(Self { key: key.to_string(), value })
    }
}

impl fmt::Display for Override {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.key, self.value)
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

/// Parses `text` as `T`, reporting serde's line and column on failure.
fn parse_typed<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Re-reads `base` with the overrides merged in.
fn with_overrides<T: Serialize + DeserializeOwned>(base: T, overrides: &[Override]) -> Result<T, CliError> {
    if overrides.is_empty() {
        return Ok(base);
    }
    let mut doc = serde_json::to_value(&base)?;
    for o in overrides {
        o.apply(&mut doc)?;
    }
    let list: Vec<String> = overrides.iter().map(ToString::to_string).collect();
    serde_json::from_value(doc).map_err(|e| CliError::Config(format!("after overrides [{}]: {e}", list.join(", "))))
}

/// Only the `config` member of a run manifest.
#[derive(Deserialize)]
struct ManifestConfig {
    config: ExperimentConfig,
}

/// Loads an experiment config, or the config snapshot of a run manifest,
/// then applies the overrides in order and validates the result.
pub fn load_experiment(path: &Path, overrides: &[Override]) -> Result<ExperimentConfig, CliError> {
    let text = read(path)?;
    let doc: Value = parse_typed(path, &text)?;
    let is_manifest = doc.get("artifacts").is_some() && doc.get("config").is_some();
    let base = if is_manifest {
        parse_typed::<ManifestConfig>(path, &text)?.config
    } else {
        parse_typed::<ExperimentConfig>(path, &text)?
    };
    let cfg = with_overrides(base, overrides)?;
    cfg.validate().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

/// Loads any deserializable document from `path`, or starts from `base`.
pub fn load_or<T: Serialize + DeserializeOwned>(
    path: Option<&Path>,
    base: T,
    overrides: &[Override],
) -> Result<T, CliError> {
    let base = match path {
        Some(p) => parse_typed(p, &read(p)?)?,
        None => base,
    };
    with_overrides(base, overrides)
}
