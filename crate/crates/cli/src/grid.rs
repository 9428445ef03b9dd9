//! Ablation grids: named experiments expanded into concrete configurations.
//!
//! ```json
//! {"schema": 1, "base": "baseline", "experiments": [
//!   {"name": "temperature", "axes": {"memory.tau": [0.1, 0.2]}},
//!   {"name": "propagation", "configs": [{"propagation": "forward-backward"}]}
//! ]}
//! ```
//!
//! `axes` expands as a Cartesian product over dotted keys; `configs` is an
//! explicit list of override objects. `base` is a preset name or an inline
//! config.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use volprop::config::RunConfig;

pub const GRID_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid invalid: {0}")]
    GridInvalid(String),
}

fn invalid(msg: impl Into<String>) -> GridError {
    GridError::GridInvalid(msg.into())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Base {
    Preset(String),
    Inline(Value),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub name: String,
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<Value>>,
    #[serde(default)]
    pub configs: Vec<serde_json::Map<String, Value>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub schema: u32,
    pub base: Base,
    pub experiments: Vec<Experiment>,
}

/// One row of an experiment.
#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub experiment: String,
    pub label: String,
    pub config_id: String,
    #[serde(skip)]
    pub config: RunConfig,
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), GridError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cur
            .as_object_mut()
            .ok_or_else(|| invalid(format!("`{path}`: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(invalid("empty key"))
}

fn merge(target: &mut Value, overrides: &serde_json::Map<String, Value>) -> Result<(), GridError> {
    for (k, v) in overrides {
        match (target.get_mut(k), v) {
            (Some(t @ Value::Object(_)), Value::Object(o)) => merge(t, o)?,
            _ => set_path(target, k, v.clone())?,
        }
    }
    Ok(())
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn realize(base: &Value, overrides: &serde_json::Map<String, Value>, name: String) -> Result<RunConfig, GridError> {
    let mut v = base.clone();
    merge(&mut v, overrides)?;
    set_path(&mut v, "name", Value::String(name.clone()))?;
    RunConfig::from_json(&v.to_string()).map_err(|e| invalid(format!("{name}: {e}")))
}

impl Grid {
    pub fn parse(text: &str) -> Result<Self, GridError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let g: Grid = serde_path_to_error::deserialize(de).map_err(|e| invalid(format!("{}: {}", e.path(), e.inner())))?;
        if g.schema != GRID_SCHEMA {
            return Err(invalid(format!("schema {} unsupported", g.schema)));
        }
        for e in &g.experiments {
            if e.axes.is_empty() == e.configs.is_empty() {
                return Err(invalid(format!("experiment `{}` needs exactly one of `axes` or `configs`", e.name)));
            }
            if let Some((k, _)) = e.axes.iter().find(|(_, v)| v.is_empty()) {
                return Err(invalid(format!("experiment `{}`: axis `{k}` has no values", e.name)));
            }
        }
        Ok(g)
    }

    pub fn base_config(&self) -> Result<RunConfig, GridError> {
        match &self.base {
            Base::Preset(name) => RunConfig::preset(name).map_err(|e| invalid(e.to_string())),
            Base::Inline(v) => RunConfig::from_json(&v.to_string()).map_err(|e| invalid(format!("base: {e}"))),
        }
    }

    /// Rows in experiment order; within an experiment, explicit configs keep
    /// their order and axes vary the last key fastest.
    pub fn expand(&self) -> Result<Vec<Row>, GridError> {
        let base = serde_json::to_value(self.base_config()?).expect("serializable");
        let mut rows = Vec::new();
        for exp in &self.experiments {
            let mut combos: Vec<Vec<(&String, &Value)>> = vec![vec![]];
            for (key, values) in &exp.axes {
                combos = combos
                    .into_iter()
                    .flat_map(|c| {
                        values.iter().map(move |v| {
                            let mut c = c.clone();
                            c.push((key, v));
                            c
                        })
                    })
                    .collect();
            }
            let mut push = |label: String, overrides: serde_json::Map<String, Value>| -> Result<(), GridError> {
                let config = realize(&base, &overrides, format!("{}:{label}", exp.name))?;
                rows.push(Row {
                    experiment: exp.name.clone(),
                    label,
                    config_id: config.config_id(),
                    config,
                });
                Ok(())
            };
            if exp.axes.is_empty() {
                for (i, o) in exp.configs.iter().enumerate() {
                    let mut o = o.clone();
                    let label = match o.remove("label") {
                        Some(Value::String(s)) => s,
                        _ => i.to_string(),
                    };
                    push(label, o)?;
                }
            } else {
                for combo in combos {
                    let label = combo
                        .iter()
                        .map(|(k, v)| format!("{k}={}", scalar(v)))
                        .collect::<Vec<_>>()
                        .join(",");
                    let mut o = serde_json::Map::new();
                    for (k, v) in combo {
                        let mut tmp = Value::Object(o);
                        set_path(&mut tmp, k, v.clone())?;
                        o = match tmp {
                            Value::Object(m) => m,
                            _ => unreachable!(),
                        };
                    }
                    push(label, o)?;
                }
            }
        }
        Ok(rows)
    }
}
