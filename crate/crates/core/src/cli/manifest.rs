//! `manifest.json`: what produced a directory of artifacts, and their hashes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::commands::Artifact;
use super::config::sha256_hex;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub features: Vec<String>,
    pub command: String,
    pub config_sha256: Option<String>,
    pub seed: u64,
    pub wall_time_s: f64,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn new(command: &str, config_sha256: Option<String>, seed: u64) -> Self {
        let mut features = Vec::new();
        if cfg!(feature = "parallel") {
            features.push("parallel".to_string());
        }
        if cfg!(feature = "fault-injection") {
            features.push("fault-injection".to_string());
        }
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            features,
            command: command.into(),
            config_sha256,
            seed,
            wall_time_s: 0.0,
            files: Vec::new(),
        }
    }
}

/// Writes the artifacts into `dir` and a manifest listing them.
pub fn write_dir(dir: &Path, artifacts: &[Artifact], mut manifest: Manifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    for a in artifacts {
        let path = dir.join(&a.name);
        std::fs::write(&path, &a.bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        manifest.files.push(FileEntry {
            path: a.name.clone(),
            sha256: sha256_hex(&a.bytes),
            bytes: a.bytes.len() as u64,
        });
    }
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    bytes.push(b'\n');
    std::fs::write(dir.join(MANIFEST), bytes)?;
    Ok(())
}

/// Files whose current hash differs from the manifest, or that are missing.
pub fn verify_dir(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut bad = Vec::new();
    for f in &manifest.files {
        match std::fs::read(dir.join(&f.path)) {
            Ok(bytes) if sha256_hex(&bytes) == f.sha256 => {}
            Ok(_) => bad.push(format!("{}: hash mismatch", f.path)),
            Err(e) => bad.push(format!("{}: {e}", f.path)),
        }
    }
    Ok(bad)
}
