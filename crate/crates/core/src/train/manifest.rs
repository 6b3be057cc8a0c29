//! JSON run manifests with dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Result, TrainConfig, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Supervised,
    Semi,
    Pretrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub stage: Stage,
    /// Directory written by `make-data`.
    pub corpus: PathBuf,
    /// Pre-trained checkpoint for semi-supervised fine-tuning.
    pub init: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub config: TrainConfig,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            stage: Stage::Supervised,
            corpus: PathBuf::from("data"),
            init: None,
            out: None,
            config: TrainConfig::default(),
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets the dotted `key` inside `v` to `raw`, parsed as JSON when possible
/// and as a string otherwise. Only existing keys can be set.
pub fn apply_override(v: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut cur = v;
    for part in key.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| TrainError::Config(format!("unknown field `{key}`")))?;
    }
    *cur = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

impl RunManifest {
    /// Defaults, then the optional JSON file, then `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(RunManifest::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)?;
            let patch: Value = serde_json::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", p.display())))?;
            merge(&mut v, patch);
        }
        for o in overrides {
            let (k, val) = o
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("override `{o}` is not key=value")))?;
            apply_override(&mut v, k.trim(), val.trim())?;
        }
        let m: RunManifest = serde_json::from_value(v).map_err(|e| TrainError::Config(e.to_string()))?;
        m.config.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
