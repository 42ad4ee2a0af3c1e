//! Run manifests: configuration, seed, version and content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).map_err(|e| exa_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Command-line arguments after the command name, as given.
    pub arguments: serde_json::Value,
    pub config: serde_json::Value,
    pub config_sha256: String,
    /// Input files by name.
    pub inputs: BTreeMap<String, String>,
    /// Output files relative to the output directory.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, arguments: serde_json::Value, config: serde_json::Value) -> Self {
        let canonical = serde_json::to_vec(&config).expect("config serializes");
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            arguments,
            config_sha256: sha256_hex(&canonical),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, label: &str, path: &Path) -> anyhow::Result<()> {
        self.inputs.insert(label.to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn output(&mut self, dir: &Path, name: &str) -> anyhow::Result<()> {
        self.outputs.insert(name.to_string(), file_sha256(&dir.join(name))?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n")
            .map_err(|e| exa_core::Error::Io { path: path.clone(), source: e })
            .context("writing manifest")
    }
}
