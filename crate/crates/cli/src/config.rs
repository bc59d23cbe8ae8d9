//! Layered configuration: built-in defaults, then the `--config` file, then
//! explicit flags.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Overlays `overlay` onto `base`. Keys must already exist in `base`; nested
/// objects merge key by key, except tagged enums (objects with a `type`
/// key), which are replaced whole.
pub fn merge(base: &mut Value, overlay: &Value, path: &str) -> Result<()> {
    let (Value::Object(dst), Value::Object(src)) = (&mut *base, overlay) else {
        *base = overlay.clone();
        return Ok(());
    };
    for (key, value) in src {
        let at = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        let slot = dst.get_mut(key).ok_or_else(|| anyhow!("unknown config key `{at}`"))?;
        let tagged = slot.as_object().is_some_and(|o| o.contains_key("type"));
        if slot.is_object() && value.is_object() && !tagged {
            merge(slot, value, &at)?;
        } else {
            *slot = value.clone();
        }
    }
    Ok(())
}

/// Reads a config file. A run manifest is accepted too; its recorded config
/// is used, provided it was written by the same subcommand.
pub fn load_file(path: &Path, command: &str) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let Value::Object(obj) = &value else {
        bail!("config {} must be a JSON object", path.display());
    };
    match (obj.get("command"), obj.get("config")) {
        (Some(Value::String(recorded)), Some(config)) => {
            if recorded != command {
                bail!("{} is a manifest for `{recorded}`, not `{command}`", path.display());
            }
            Ok(config.clone())
        }
        _ => Ok(value),
    }
}

/// Defaults, then the optional config file, then `flags`.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    command: &str,
    flags: Map<String, Value>,
) -> Result<T> {
    let mut value = serde_json::to_value(defaults)?;
    if let Some(path) = file {
        merge(&mut value, &load_file(path, command)?, "")?;
    }
    merge(&mut value, &Value::Object(flags), "")?;
    serde_json::from_value(value).context("config has the wrong shape")
}

/// Collects explicitly given flags, keyed like the config file.
#[derive(Default)]
pub struct Flags(Map<String, Value>);

impl Flags {
    pub fn set(&mut self, key: &str, value: Option<impl Serialize>) -> &mut Self {
        if let Some(v) = value {
            let v = serde_json::to_value(v).expect("flag values serialize");
            match key.split_once('.') {
                Some((outer, inner)) => {
                    let entry = self.0.entry(outer).or_insert_with(|| Value::Object(Map::new()));
                    entry
                        .as_object_mut()
                        .expect("nested flag group")
                        .insert(inner.to_string(), v);
                }
                None => {
                    self.0.insert(key.to_string(), v);
                }
            }
        }
        self
    }

    pub fn into_map(self) -> Map<String, Value> {
        self.0
    }
}
