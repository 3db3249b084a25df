use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: String,
    /// SHA-256 over `blob <len>\0<content>`, the way git names objects.
    pub sha256: String,
    pub bytes: u64,
}

pub fn hash_file(path: &Path) -> Result<FileHash> {
    let data = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", data.len()));
    h.update(&data);
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: hex::encode(h.finalize()),
        bytes: data.len() as u64,
    })
}

/// Hashes a file, or every file under a directory in sorted order.
pub fn hash_path(path: &Path) -> Result<Vec<FileHash>> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        entries.sort();
        let mut out = Vec::new();
        for e in entries {
            if e.file_name().is_some_and(|n| n == MANIFEST_FILE) {
                continue;
            }
            out.extend(hash_path(&e)?);
        }
        Ok(out)
    } else {
        Ok(vec![hash_file(path)?])
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub timings: BTreeMap<String, f64>,
    pub notes: BTreeMap<String, serde_json::Value>,
    pub timestamp: String,
}

/// Collects what a run read and wrote; `finish` writes `manifest.json`.
pub struct ManifestBuilder {
    subcommand: String,
    seed: u64,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    pub timings: BTreeMap<String, f64>,
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl ManifestBuilder {
    pub fn new(subcommand: &str, seed: u64) -> Self {
        Self {
            subcommand: subcommand.into(),
            seed,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn config<S: Serialize>(&mut self, config: &S) -> Result<()> {
        self.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn note<S: Serialize>(&mut self, key: &str, value: S) -> Result<()> {
        self.notes.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn finish(self, out_dir: &Path) -> Result<PathBuf> {
        let mut inputs = Vec::new();
        for p in &self.inputs {
            inputs.extend(hash_path(p)?);
        }
        let mut outputs = Vec::new();
        for p in &self.outputs {
            outputs.extend(hash_path(p)?);
        }
        let manifest = RunManifest {
            tool: "flowdetect",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: self.subcommand,
            argv: std::env::args().collect(),
            seed: self.seed,
            config: self.config,
            inputs,
            outputs,
            timings: self.timings,
            notes: self.notes,
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        let path = out_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_style_hash_of_empty_blob() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e");
        fs::write(&p, b"").unwrap();
        // git hash-object --object-format=sha256 /dev/null
        assert_eq!(
            hash_file(&p).unwrap().sha256,
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }
}
