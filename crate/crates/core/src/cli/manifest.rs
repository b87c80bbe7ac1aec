use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Record of one command invocation. Paths are relative to the output
/// directory where possible; no wall-clock fields so reruns hash equal.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// sha256 of every output, keyed like `outputs`.
    pub hashes: BTreeMap<String, String>,
    pub settings: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, seed: u64, settings: serde_json::Value) -> Self {
        Self {
            command: command.to_owned(),
            config_path: config_path.map(|p| p.display().to_string()),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            hashes: BTreeMap::new(),
            settings,
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    /// Hash the outputs (given relative to `out_dir`) and write the manifest.
    pub fn finish(mut self, out_dir: &Path, outputs: impl IntoIterator<Item = String>) -> Result<PathBuf> {
        for rel in outputs {
            let h = sha256_file(&out_dir.join(&rel))?;
            self.hashes.insert(rel.clone(), h);
            self.outputs.push(rel);
        }
        let path = out_dir.join(MANIFEST_FILE);
        scdlab::fsio::write_atomic(&path, serde_json::to_string_pretty(&self)?.as_bytes())?;
        Ok(path)
    }
}
