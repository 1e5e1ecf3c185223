//! JSON config files that mirror command flags. File values are read first;
//! any flag given on the command line overrides them.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{usage, CliResult};

fn is_unset(v: &Value) -> bool {
    match v {
        Value::Null => true,
        Value::Array(a) => a.is_empty(),
        _ => false,
    }
}

/// Overlay `flags` on the JSON object in `config`. Keys are the flag names
/// with `-` or `_`; unknown keys are a usage error.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> CliResult<T> {
    let Value::Object(flag_map) = serde_json::to_value(flags).map_err(|e| usage(e.to_string()))?
    else {
        unreachable!("argument structs serialize to objects");
    };
    let Some(path) = config else {
        return flags_only(flag_map);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let file: Value = serde_json::from_str(&text)
        .map_err(|e| usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    let Value::Object(file) = file else {
        return Err(usage(format!(
            "config {} must hold a JSON object",
            path.display()
        )));
    };
    let mut merged = Map::new();
    for (key, value) in file {
        let key = key.replace('-', "_");
        if !flag_map.contains_key(&key) {
            return Err(usage(format!(
                "unknown key {key:?} in config {}",
                path.display()
            )));
        }
        merged.insert(key, value);
    }
    for (key, value) in flag_map {
        if !is_unset(&value) || !merged.contains_key(&key) {
            merged.insert(key, value);
        }
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn flags_only<T: DeserializeOwned>(map: Map<String, Value>) -> CliResult<T> {
    serde_json::from_value(Value::Object(map)).map_err(|e| usage(e.to_string()))
}

/// A required option after merging.
pub fn required<T: Clone>(value: &Option<T>, flag: &str) -> CliResult<T> {
    value
        .clone()
        .ok_or_else(|| usage(format!("missing required --{flag}")))
}
