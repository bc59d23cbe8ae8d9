//! Run manifests: everything needed to replay a command.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: Value,
    /// Keyed by role and file, e.g. `images.bin`.
    pub inputs: BTreeMap<String, InputRecord>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: &impl Serialize) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            tool_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            seed,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
        })
    }

    /// Records the hash of a single input file.
    pub fn add_file(&mut self, role: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        self.inputs.insert(
            role.to_string(),
            InputRecord {
                path: path.display().to_string(),
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(())
    }

    /// Records both sidecar files of an archive or checkpoint prefix.
    pub fn add_prefix(&mut self, role: &str, prefix: &Path) -> Result<()> {
        for ext in ["json", "bin"] {
            self.add_file(&format!("{role}.{ext}"), &fdalign::embed_store::sidecar(prefix, ext))?;
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("{}.manifest.json", self.command));
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_digest() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
