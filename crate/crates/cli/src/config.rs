//! Run configuration as a flat JSON object with dotted keys.
//!
//! Sections: `train.*` (optimization and data), `mask.*` (masking schedule),
//! `model.*` (architecture) and `decode.*` (sampling). Nested objects are
//! accepted too and flattened before validation. Every key is optional and
//! defaults to the toy setup; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use dream::decoding::DecodeConfig;
use dream::training::TrainConfig;
use dream::{DreamError, Result};
use serde_json::{Map, Value};

pub type FlatConfig = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| DreamError::Config(format!("config is not valid JSON: {e}")))?;
        Self::from_value(&value)
    }

    pub fn from_value(value: &Value) -> Result<Self> {
        if !value.is_object() {
            return Err(DreamError::Config("config must be a JSON object".into()));
        }
        let mut flat = RunConfig::default().to_flat();
        let mut given = FlatConfig::new();
        flatten("", value, &mut given);
        for (key, v) in given {
            match flat.get_mut(&key) {
                Some(slot) => *slot = v,
                None => return Err(DreamError::Config(format!("unknown key `{key}`"))),
            }
        }
        Self::from_flat(&flat)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Every effective key with its value.
    pub fn to_flat(&self) -> FlatConfig {
        let mut train = serde_json::to_value(&self.train).expect("config serializes");
        let obj = train.as_object_mut().expect("struct");
        let mask = obj.remove("mask").expect("mask section");
        let model = obj.remove("model").expect("model section");
        let decode = serde_json::to_value(&self.decode).expect("config serializes");
        let mut flat = FlatConfig::new();
        flatten("train", &train, &mut flat);
        flatten("mask", &mask, &mut flat);
        flatten("model", &model, &mut flat);
        flatten("decode", &decode, &mut flat);
        flat
    }

    fn from_flat(flat: &FlatConfig) -> Result<Self> {
        let mut root = Map::new();
        for (key, v) in flat {
            insert_path(&mut root, key, v.clone());
        }
        let mut section = |name: &str| root.remove(name).unwrap_or_else(|| Value::Object(Map::new()));
        let mut train = section("train");
        let (mask, model, decode) = (section("mask"), section("model"), section("decode"));
        let obj = train.as_object_mut().expect("object");
        obj.insert("mask".into(), mask);
        obj.insert("model".into(), model);
        let bad = |what: &str, e: serde_json::Error| DreamError::Config(format!("{what}: {e}"));
        let train: TrainConfig = serde_json::from_value(train).map_err(|e| bad("train/mask/model", e))?;
        let decode: DecodeConfig = serde_json::from_value(decode).map_err(|e| bad("decode", e))?;
        train.validate()?;
        decode.validate()?;
        Ok(Self { train, decode })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("values serialize")
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut FlatConfig) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), value.clone());
        }
    }
}

fn insert_path(root: &mut Map<String, Value>, key: &str, value: Value) {
    match key.split_once('.') {
        None => {
            root.insert(key.to_string(), value);
        }
        Some((head, rest)) => {
            let child = root
                .entry(head.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            if let Value::Object(m) = child {
                insert_path(m, rest, value);
            }
        }
    }
}
