//! Run manifests written next to every command's outputs.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// SHA-256 over the input files, in path order.
    pub input_hash: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            input_hash: hex(&Sha256::new().finalize()),
            inputs: Vec::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Records `paths` as inputs and rehashes all of them.
    pub fn with_inputs(mut self, mut paths: Vec<PathBuf>) -> io::Result<Self> {
        paths.sort();
        paths.dedup();
        self.input_hash = hash_files(&paths)?;
        self.inputs = paths;
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(path, text + "\n")
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Digest of each file's path followed by its length and bytes.
pub fn hash_files(paths: &[PathBuf]) -> io::Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = fs::read(p)?;
        h.update(p.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

/// Manifest path for a single output file: `out.obj` → `out.manifest.json`.
pub fn manifest_beside(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{}.manifest.json", stem))
}
