//! Layered configuration: built-in defaults, then an optional JSON file, then
//! command-line flags. Layers are merged as JSON objects so a file may set
//! any subset of nested fields.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

/// Recursively overlays `top` onto `base`. Objects merge key by key; any
/// other value in `top` replaces the one in `base`.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
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

/// Sets `value` at a dotted `path` inside `root`, creating objects on the way.
pub fn set(root: &mut Value, path: &str, value: impl Serialize) {
    let value = serde_json::to_value(value).expect("flag values serialize");
    let mut cur = root;
    let mut parts = path.split('.').peekable();
    while let Some(part) = parts.next() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().expect("just made an object");
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return;
        }
        cur = obj.entry(part).or_insert_with(|| Value::Object(Map::new()));
    }
}

/// Flag overrides collected as a JSON object; `None` flags are skipped.
#[derive(Default)]
pub struct Overrides(Value);

impl Overrides {
    pub fn new() -> Self {
        Self(Value::Object(Map::new()))
    }

    pub fn opt<T: Serialize>(&mut self, path: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            set(&mut self.0, path, v);
        }
        self
    }
}

pub fn read_json(path: &Path) -> Result<Value, CliError> {
    let text =
        std::fs::read(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_slice(&text)
        .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))
}

/// `defaults`, overlaid with the file at `file` and then `overrides`.
pub fn resolve<T: DeserializeOwned>(
    defaults: &impl Serialize,
    file: Option<&Path>,
    overrides: Overrides,
) -> Result<T, CliError> {
    let mut value = serde_json::to_value(defaults).expect("defaults serialize");
    if let Some(path) = file {
        merge(&mut value, read_json(path)?);
    }
    merge(&mut value, overrides.0);
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}
