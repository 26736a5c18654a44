use std::path::{Path, PathBuf};

use regspan::model::ModelConfig;
use regspan::synth::SynthConfig;
use regspan::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Optional pretrained character vectors, one `char v1 .. vD` per line.
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for synthetic data generation.
    pub data_seed: u64,
    pub data: DataPaths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn validate(&self) -> regspan::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override {assignment:?} is not of the form key=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(ConfigError(format!("override key {path:?} is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (k, key) in keys.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(ConfigError(format!(
                    "override {path:?}: {} is not an object",
                    keys[..k].join(".")
                )));
            }
        }
        let map = node.as_object_mut().expect("object");
        if k + 1 == keys.len() {
            map.insert(key.to_string(), value);
            break;
        }
        node = map.entry(key.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Reads the optional JSON file, applies overrides and validates.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut root = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let path = e.path().to_string();
        ConfigError(format!("{path}: {}", e.into_inner()))
    })?;
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_override_reaches_nested_fields() {
        let cfg = resolve(None, &["model.hidden=16".into(), "train.overlap=flat".into()]).unwrap();
        assert_eq!(cfg.model.hidden, 16);
        assert_eq!(cfg.train.overlap, regspan::decode::OverlapMode::Flat);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = resolve(None, &["model.hiden=16".into()]).unwrap_err();
        assert!(err.0.contains("model") && err.0.contains("hiden"), "{}", err.0);
    }

    #[test]
    fn invalid_value_is_reported() {
        let err = resolve(None, &["train.lr=-1".into()]).unwrap_err();
        assert!(err.0.contains("train.lr"), "{}", err.0);
        assert!(resolve(None, &["novalue".into()]).is_err());
    }
}
