//! Flat `key = value` configuration.
//!
//! Keys are the field names of [`TrainConfig`] and [`ModelShape`]. Blank
//! lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::TrainConfig;

/// Architecture settings; the vocabulary size comes from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let t = ModelConfig::tiny(0);
        ModelShape { d_model: t.d_model, layers: t.layers, heads: t.heads, ffn: t.ffn, max_len: t.max_len }
    }
}

impl ModelShape {
    pub fn of(c: &ModelConfig) -> Self {
        ModelShape { d_model: c.d_model, layers: c.layers, heads: c.heads, ffn: c.ffn, max_len: c.max_len }
    }

    pub fn config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
            max_len: self.max_len,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Settings {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub model: ModelShape,
}

impl Settings {
    /// Sets one field from its textual value, keeping the field's type.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut v = serde_json::to_value(&*self)?;
        let map = v.as_object_mut().expect("settings serialize to an object");
        let old = map.get(key).ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let bad = || Error::Config(format!("invalid value {value:?} for {key}"));
        let new = match old {
            Value::Bool(_) => Value::Bool(value.parse().map_err(|_| bad())?),
            Value::Number(n) if n.is_u64() => Value::from(value.parse::<u64>().map_err(|_| bad())?),
            Value::Number(_) => {
                let f: f64 = value.parse().map_err(|_| bad())?;
                serde_json::Number::from_f64(f).map(Value::Number).ok_or_else(bad)?
            }
            _ => return Err(bad()),
        };
        map.insert(key.to_string(), new);
        *self = serde_json::from_value(v)?;
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.config(crate::tokenizer::RESERVED.len(), 0).validate()
    }

    /// Every setting as text, sorted by key.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let v = serde_json::to_value(self).expect("settings serialize");
        v.as_object()
            .expect("object")
            .iter()
            .map(|(k, v)| (k.clone(), v.to_string()))
            .collect()
    }
}
