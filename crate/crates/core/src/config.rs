//! Versioned run configuration, presets and stable configuration ids.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{Propagation, SyntheticParams};
use crate::membank::MemoryPolicy;
use crate::preproc::{ClaheParams, Preprocessor, WindowSpec};
use crate::prompts::Strategy;
use crate::volume::Axis;

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    /// Names the offending key as a dotted path.
    #[error("invalid config key `{key}`: {detail}")]
    ConfigInvalid { key: String, detail: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

fn invalid(key: &str, detail: impl Into<String>) -> ConfigError {
    ConfigError::ConfigInvalid {
        key: key.into(),
        detail: detail.into(),
    }
}

impl ConfigError {
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::ConfigInvalid { key, .. } => Some(key),
            ConfigError::UnknownPreset(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub enabled: bool,
    pub level: f64,
    pub width: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            level: WindowSpec::BONE.level,
            width: WindowSpec::BONE.width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClaheConfig {
    pub enabled: bool,
    pub clip: f64,
    pub tiles: [usize; 2],
}

impl Default for ClaheConfig {
    fn default() -> Self {
        let p = ClaheParams::default();
        Self {
            enabled: false,
            clip: p.clip_limit,
            tiles: [p.tiles.0, p.tiles.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Synthetic,
    Onnx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Model scale label, passed through to reports only.
    pub scale: String,
    /// Exported graph directory for the ONNX backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_dir: Option<String>,
    pub tolerance: f32,
    pub dilation: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let p = SyntheticParams::default();
        Self {
            kind: BackendKind::Synthetic,
            scale: "small".into(),
            model_dir: None,
            tolerance: p.tolerance,
            dilation: p.dilation,
        }
    }
}

impl BackendConfig {
    pub fn synthetic_params(&self) -> SyntheticParams {
        SyntheticParams {
            tolerance: self.tolerance,
            dilation: self.dilation,
            ..SyntheticParams::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    pub enabled: bool,
    pub margin: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { enabled: true, margin: 8 }
    }
}

/// One experiment configuration. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema: u32,
    /// Display label; not part of the configuration id.
    pub name: String,
    pub propagation: Propagation,
    /// Prompt strategy, applied per axis for three-axis runs.
    pub prompt: Strategy,
    /// Traversal axis for single-axis runs.
    pub axis: Axis,
    pub window: WindowConfig,
    pub clahe: ClaheConfig,
    pub memory: MemoryPolicy,
    pub backend: BackendConfig,
    pub crop: CropConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: CONFIG_SCHEMA,
            name: "baseline".into(),
            propagation: Propagation::Forward,
            prompt: Strategy::Fml,
            axis: Axis::Axial,
            window: WindowConfig::default(),
            clahe: ClaheConfig::default(),
            memory: MemoryPolicy::default(),
            backend: BackendConfig::default(),
            crop: CropConfig::default(),
            seed: 0,
        }
    }
}

pub const PRESETS: [&str; 6] = ["baseline", "np", "sps", "is", "is+sps", "three-axis-9"];

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { String::new() } else { path };
            invalid(&key, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid("", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema != CONFIG_SCHEMA {
            return Err(invalid("schema", format!("expected {CONFIG_SCHEMA}, found {}", self.schema)));
        }
        let m = &self.memory;
        if !(0.0..=1.0).contains(&m.tau) {
            return Err(invalid("memory.tau", format!("{} is outside [0, 1]", m.tau)));
        }
        if m.stride == 0 {
            return Err(invalid("memory.stride", "must be at least 1"));
        }
        if !(self.window.width.is_finite() && self.window.width > 0.0) {
            return Err(invalid("window.width", "must be positive"));
        }
        if !self.window.level.is_finite() {
            return Err(invalid("window.level", "must be finite"));
        }
        if self.clahe.clip.is_nan() || self.clahe.clip <= 0.0 {
            return Err(invalid("clahe.clip", "must be positive"));
        }
        if self.clahe.tiles.contains(&0) {
            return Err(invalid("clahe.tiles", "tile counts must be at least 1"));
        }
        if !(self.backend.tolerance.is_finite() && self.backend.tolerance >= 0.0) {
            return Err(invalid("backend.tolerance", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let mut c = RunConfig {
            name: name.into(),
            ..RunConfig::default()
        };
        match name {
            "baseline" => {}
            "np" => c.window.enabled = false,
            "sps" => c.memory.tau = 0.3,
            "is" => c.memory.intelligent_slicing = true,
            "is+sps" => {
                c.memory.intelligent_slicing = true;
                c.memory.tau = 0.3;
            }
            "three-axis-9" => c.propagation = Propagation::ThreeAxis,
            other => return Err(ConfigError::UnknownPreset(other.into())),
        }
        Ok(c)
    }

    pub fn preprocessor(&self) -> Preprocessor {
        Preprocessor {
            window: self.window.enabled.then_some(WindowSpec {
                level: self.window.level,
                width: self.window.width,
            }),
            clahe: self.clahe.enabled.then(|| ClaheParams {
                clip_limit: self.clahe.clip,
                tiles: (self.clahe.tiles[0], self.clahe.tiles[1]),
            }),
        }
    }

    /// Canonical JSON: sorted keys, compact, `name` removed.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("serializable");
        if let serde_json::Value::Object(m) = &mut v {
            m.remove("name");
        }
        // serde_json maps are ordered by key, so this is already sorted
        serde_json::to_string(&v).expect("serializable")
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical_json`].
    pub fn config_id(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json_pretty()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn tau_out_of_range_names_key() {
        let err = RunConfig::from_json(r#"{"memory": {"tau": 1.5}}"#).unwrap_err();
        assert_eq!(err.key(), Some("memory.tau"));
    }

    #[test]
    fn unknown_and_mistyped_keys_name_path() {
        let err = RunConfig::from_json(r#"{"memory": {"tua": 0.3}}"#).unwrap_err();
        assert_eq!(err.key(), Some("memory.tua"));
        let err = RunConfig::from_json(r#"{"window": {"level": "high"}}"#).unwrap_err();
        assert_eq!(err.key(), Some("window.level"));
        let err = RunConfig::from_json(r#"{"schema": 2}"#).unwrap_err();
        assert_eq!(err.key(), Some("schema"));
        let err = RunConfig::from_json(r#"{"prompt": "uniform:0"}"#).unwrap_err();
        assert_eq!(err.key(), Some("prompt"));
    }

    #[test]
    fn config_id_ignores_name_and_key_order() {
        let a = RunConfig::from_json(r#"{"name": "x", "seed": 3, "memory": {"tau": 0.3, "stride": 2}}"#).unwrap();
        let b = RunConfig::from_json(r#"{"memory": {"stride": 2, "tau": 0.3}, "seed": 3, "name": "y"}"#).unwrap();
        assert_eq!(a.config_id(), b.config_id());
        assert_eq!(a.config_id().len(), 16);
        let c = RunConfig::from_json(r#"{"memory": {"stride": 2, "tau": 0.4}, "seed": 3}"#).unwrap();
        assert_ne!(a.config_id(), c.config_id());
    }

    #[test]
    fn canonical_json_sorted() {
        let j = RunConfig::default().canonical_json();
        let keys: Vec<String> = serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(&j)
            .unwrap()
            .keys()
            .cloned()
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(j.starts_with(r#"{"axis":"axial","backend":{"dilation":2,"kind":"synthetic""#), "{j}");
    }

    #[test]
    fn presets_distinct() {
        let ids: std::collections::BTreeSet<String> =
            PRESETS.iter().map(|p| RunConfig::preset(p).unwrap().config_id()).collect();
        assert_eq!(ids.len(), PRESETS.len());
        assert_eq!(RunConfig::preset("sps").unwrap().memory.tau, 0.3);
        assert!(RunConfig::preset("np").unwrap().preprocessor().window.is_none());
        assert!(RunConfig::preset("nope").is_err());
    }
}
