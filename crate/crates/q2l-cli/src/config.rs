//! Flag/file configuration plumbing.
//!
//! Every subcommand resolves its settings the same way: start from the
//! built-in defaults, overlay the flat JSON config file if one was given,
//! then overlay any flags the user passed. Unknown keys in the file are
//! rejected by name; `--dump-config` prints the resolved settings as JSON
//! that reproduces the run when fed back via `--config`.

use std::error::Error;
use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Marker for mistakes in flags or config files; mapped to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Error for UsageError {}

pub fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

/// Flag values to lay over the file; only flags the user actually passed
/// are inserted, so file values survive where flags were omitted.
#[derive(Default)]
pub struct Overlay(Map<String, Value>);

impl Overlay {
    pub fn set<T: Serialize>(&mut self, key: &str, value: &Option<T>) {
        if let Some(v) = value {
            self.0
                .insert(key.to_string(), serde_json::to_value(v).expect("plain value"));
        }
    }

    /// Boolean switches: only an explicitly raised flag overrides the file.
    pub fn raise(&mut self, key: &str, raised: bool, value: bool) {
        if raised {
            self.0.insert(key.to_string(), Value::Bool(value));
        }
    }
}

/// Defaults <- file <- flags, with unknown file keys rejected by name.
pub fn resolve<T>(file: Option<&Path>, overlay: Overlay) -> anyhow::Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut map = match file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let value: Value = match serde_json::from_str(&text) {
                Ok(v) => v,
                Err(e) => return usage(format!("config {}: {e}", path.display())),
            };
            match value {
                Value::Object(m) => m,
                _ => return usage(format!("config {} must be a JSON object", path.display())),
            }
        }
        None => Map::new(),
    };
    // Fill unset keys from the defaults so deny_unknown_fields sees a
    // complete object and field-level serde defaults are not needed.
    let defaults = serde_json::to_value(T::default()).expect("config serializes");
    if let Value::Object(d) = defaults {
        for (k, v) in d {
            map.entry(k).or_insert(v);
        }
    }
    for (k, v) in overlay.0 {
        map.insert(k, v);
    }
    match serde_json::from_value(Value::Object(map)) {
        Ok(cfg) => Ok(cfg),
        Err(e) => usage(format!("invalid config: {e}")),
    }
}

/// Prints the resolved configuration as reusable JSON.
pub fn dump<T: Serialize>(cfg: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(cfg)?);
    Ok(())
}
