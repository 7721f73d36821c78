//! Flat `key = value` configuration with environment and flag overrides.
//!
//! Keys are the field names of the configuration structs. Values are parsed
//! according to the type of the field they replace; `none` clears optional
//! fields.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{DpgError, Result};

pub const ENV_PREFIX: &str = "DPG_";

pub type KvMap = BTreeMap<String, String>;

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<KvMap> {
    let mut out = KvMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DpgError::Parse(format!("config line {}: expected key = value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn load_kv(path: &Path) -> Result<KvMap> {
    let text = fs::read_to_string(path).map_err(|e| DpgError::io(path, e))?;
    parse_kv(&text)
}

/// `DPG_LR=0.01` becomes `lr = 0.01`.
pub fn env_overrides() -> KvMap {
    std::env::vars()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|s| (s.to_ascii_lowercase(), v)))
        .collect()
}

/// `key=value` pairs given on the command line.
pub fn parse_sets(sets: &[String]) -> Result<KvMap> {
    parse_kv(&sets.join("\n"))
}

fn convert(key: &str, raw: &str, current: &Value) -> Result<Value> {
    let bad = || DpgError::Parse(format!("invalid value {raw:?} for {key}"));
    if raw.eq_ignore_ascii_case("none") || raw.eq_ignore_ascii_case("null") {
        return Ok(Value::Null);
    }
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::String(_) => Value::String(raw.to_string()),
        Value::Number(n) if n.is_u64() && !raw.contains(['.', 'e', 'E']) => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        _ => {
            if let Ok(u) = raw.parse::<u64>() {
                Value::from(u)
            } else {
                let f: f64 = raw.parse().map_err(|_| bad())?;
                serde_json::Number::from_f64(f).map(Value::Number).ok_or_else(bad)?
            }
        }
    })
}

/// Applies the entries of `kv` that name fields of `T`, recording which
/// keys were used in `consumed`.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, kv: &KvMap, consumed: &mut BTreeSet<String>) -> Result<T> {
    let mut value = serde_json::to_value(base).map_err(|e| DpgError::Parse(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| DpgError::Parse("configuration is not a struct".into()))?;
    for (k, raw) in kv {
        if let Some(cur) = obj.get(k) {
            let new = convert(k, raw, cur)?;
            obj.insert(k.clone(), new);
            consumed.insert(k.clone());
        }
    }
    serde_json::from_value(value).map_err(|e| DpgError::Parse(format!("configuration: {e}")))
}

/// Fails on keys that no configuration struct accepted.
pub fn reject_unknown(kv: &KvMap, consumed: &BTreeSet<String>) -> Result<()> {
    let unknown: Vec<&str> = kv.keys().filter(|k| !consumed.contains(*k)).map(String::as_str).collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(DpgError::Parse(format!("unknown configuration keys: {}", unknown.join(", "))))
    }
}

/// Renders a struct back into `key = value` lines.
pub fn to_kv<T: Serialize>(cfg: &T) -> String {
    let value = serde_json::to_value(cfg).expect("serializable config");
    let mut out = String::new();
    if let Value::Object(obj) = value {
        for (k, v) in obj {
            let s = match v {
                Value::Null => "none".to_string(),
                Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {s}\n"));
        }
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ModelConfig, Variant};
    use crate::trainer::{ExampleMode, TrainConfig};

    #[test]
    fn applies_typed_values() {
        let kv = parse_kv("lr = 0.01  # comment\nbatch_size=32\ngrad_clip = 5\nexample_mode = last-only\nnormalize_cl=false\n\nvariant = Diff+DE+G\nd = 16\n").unwrap();
        let mut used = BTreeSet::new();
        let t = apply(&TrainConfig::default(), &kv, &mut used).unwrap();
        let m = apply(&ModelConfig::default(), &kv, &mut used).unwrap();
        reject_unknown(&kv, &used).unwrap();
        assert_eq!(t.lr, 0.01);
        assert_eq!(t.batch_size, 32);
        assert_eq!(t.grad_clip, Some(5.0));
        assert_eq!(t.example_mode, ExampleMode::LastOnly);
        assert!(!t.normalize_cl);
        assert_eq!(m.variant, Variant::DiffDeG);
        assert_eq!(m.d, 16);
    }

    #[test]
    fn round_trips_and_rejects() {
        let t = TrainConfig {
            grad_clip: Some(1.5),
            ..TrainConfig::default()
        };
        let kv = parse_kv(&to_kv(&t)).unwrap();
        let mut used = BTreeSet::new();
        assert_eq!(apply(&TrainConfig::default(), &kv, &mut used).unwrap(), t);

        let kv = parse_kv("nope = 1").unwrap();
        let mut used = BTreeSet::new();
        apply(&TrainConfig::default(), &kv, &mut used).unwrap();
        assert!(reject_unknown(&kv, &used).is_err());
        assert!(parse_kv("novalue").is_err());
        let kv = parse_kv("batch_size = many").unwrap();
        assert!(apply(&TrainConfig::default(), &kv, &mut BTreeSet::new()).is_err());
    }
}
