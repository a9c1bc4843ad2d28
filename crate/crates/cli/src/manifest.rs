//! Run manifest written next to every command's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use gpgnn::training::sub_seed;
use gpgnn::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub sub_seeds: BTreeMap<String, u64>,
    /// Resolved configuration and its hash over the canonical JSON text.
    pub config: Value,
    pub config_sha256: String,
    /// Input role to file name and content hash.
    pub inputs: BTreeMap<String, InputFile>,
    /// Output file name to content hash.
    pub outputs: BTreeMap<String, String>,
    pub details: Value,
}

impl Manifest {
    pub fn new(command: &str, config: Value, seed: Option<u64>) -> Self {
        let text = serde_json::to_string(&config).expect("json value serializes");
        let sub_seeds = seed
            .map(|s| {
                ["init", "shuffle", "dropout"]
                    .into_iter()
                    .map(|n| (n.to_string(), sub_seed(s, n)))
                    .collect()
            })
            .unwrap_or_default();
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            sub_seeds,
            config_sha256: sha256_hex(text.as_bytes()),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            details: json!({}),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::File {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.inputs.insert(
            role.to_string(),
            InputFile {
                name: display_name(path),
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(())
    }

    /// Hashes output files; they must already be written.
    pub fn outputs(&mut self, paths: &[PathBuf]) -> Result<()> {
        for p in paths {
            let bytes = fs::read(p).map_err(|e| Error::File {
                path: p.clone(),
                source: e,
            })?;
            self.outputs.insert(display_name(p), sha256_hex(&bytes));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| Error::File {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}

/// Keys files by name only so manifests do not depend on where a run lives.
fn display_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
