//! Run manifests: config snapshot, seed and content hashes of every input
//! and output file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use metasbir::config::ExperimentConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
struct FileHash {
    name: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config_hash: String,
    config: Vec<String>,
    inputs: Vec<FileHash>,
    artifacts: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects inputs and outputs of one command.
#[derive(Debug, Default)]
pub struct Recorder {
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

impl Recorder {
    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn artifact(&mut self, path: &Path) {
        if !self.artifacts.iter().any(|p| p == path) {
            self.artifacts.push(path.to_path_buf());
        }
    }

    /// Writes `manifest-<command>.json` into `out` and returns its path.
    /// Files are listed by name only so manifests from different output
    /// directories compare equal.
    pub fn write(&self, out: &Path, command: &str, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let hashes = |paths: &[PathBuf]| -> Result<Vec<FileHash>> {
            paths
                .iter()
                .map(|p| {
                    Ok(FileHash {
                        name: p.file_name().map_or_else(
                            || p.display().to_string(),
                            |n| n.to_string_lossy().into_owned(),
                        ),
                        sha256: sha256_file(p)?,
                    })
                })
                .collect()
        };
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg.render().lines().map(str::to_string).collect(),
            inputs: hashes(&self.inputs)?,
            artifacts: hashes(&self.artifacts)?,
        };
        let path = out.join(format!("manifest-{command}.json"));
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
