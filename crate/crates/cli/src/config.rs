//! Layered run configuration: struct defaults, then a JSON file, then
//! `--key=value` flags. Nested fields are addressed with dots
//! (`--refine.lr=5`) and list items by index (`--scenes.0.k=3`).

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: String,
}

impl Override {
    /// Parses `--key=value`; returns `None` for anything else.
    pub fn parse(arg: &str) -> Option<Self> {
        let body = arg.strip_prefix("--")?;
        let (key, value) = body.split_once('=')?;
        if key.is_empty() {
            return None;
        }
        Some(Self {
            key: key.to_string(),
            value: value.to_string(),
        })
    }
}

/// Flag values are JSON when they parse as JSON, strings otherwise.
fn flag_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

/// Deep-merges `over` into `base`. Objects merge key by key and reject keys
/// the defaults do not know; everything else is replaced wholesale.
fn merge(base: &mut Value, over: Value, path: &str) -> Result<(), CliError> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let p = join(path, &k);
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &p)?,
                    None => return Err(CliError::Config(format!("{p}: unknown field"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let mut walked = String::new();
    for seg in key.split('.') {
        walked = join(&walked, seg);
        if cur.is_null() {
            *cur = Value::Object(Map::new());
            let Value::Object(m) = cur else { unreachable!() };
            cur = m.entry(seg.to_string()).or_insert(Value::Null);
            continue;
        }
        cur = match cur {
            Value::Object(m) => m
                .get_mut(seg)
                .ok_or_else(|| CliError::Config(format!("--{key}: unknown field {walked}")))?,
            Value::Array(items) => {
                let i: usize = seg
                    .parse()
                    .map_err(|_| CliError::Config(format!("--{key}: {walked} needs a list index")))?;
                let n = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| CliError::Config(format!("--{key}: index {i} out of range (len {n})")))?
            }
            _ => return Err(CliError::Config(format!("--{key}: {walked} is not a nested field"))),
        };
    }
    *cur = value;
    Ok(())
}

fn parse_tree<T: DeserializeOwned>(tree: Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(tree).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.into_inner()))
    })
}

/// Resolves the configuration with precedence flag > file > default.
pub fn resolve<T>(file: Option<&Path>, overrides: &[Override]) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut tree = serde_json::to_value(T::default()).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let from_file: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut tree, from_file, "")?;
    }
    for o in overrides {
        set_path(&mut tree, &o.key, flag_value(&o.value))?;
    }
    parse_tree(tree)
}
