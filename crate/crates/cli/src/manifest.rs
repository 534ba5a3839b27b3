//! Output staging and the reproducibility manifest written next to every
//! artifact set.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputFile {
    pub fn hash(path: &Path, contents: &[u8]) -> Self {
        Self {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(contents)),
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a C,
    config_sha256: String,
    seeds: &'a [u64],
    inputs: &'a [InputFile],
    outputs: Vec<&'a str>,
}

/// Artifacts held in memory until the command has finished, so failed runs
/// leave nothing behind.
#[derive(Debug, Default)]
pub struct Staged {
    files: Vec<(String, Vec<u8>)>,
}

impl Staged {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    /// Writes every staged file plus the manifest into `dir`.
    pub fn commit<C: Serialize>(
        self,
        dir: &Path,
        command: &str,
        config: &C,
        seeds: &[u64],
        inputs: &[InputFile],
    ) -> Result<(), Failure> {
        let config_sha256 = hex::encode(Sha256::digest(serde_json::to_vec(config)?));
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            config_sha256,
            seeds,
            inputs,
            outputs: self.files.iter().map(|(n, _)| n.as_str()).collect(),
        };
        let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
        manifest_bytes.push(b'\n');
        fs::create_dir_all(dir)
            .map_err(|e| Failure::internal(format!("cannot create {}: {e}", dir.display())))?;
        for (name, bytes) in &self.files {
            fs::write(dir.join(name), bytes)?;
        }
        fs::write(dir.join(MANIFEST_FILE), manifest_bytes)?;
        Ok(())
    }
}
