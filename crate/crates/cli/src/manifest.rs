//! Run manifests: what a command read, what it wrote, and how.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use jointdiff_core::{io, Error, Result};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub code_version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Input path to sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output path to sha256.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            code_version: CODE_VERSION.to_string(),
            config,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    /// Records an input after checking it against the manifest that
    /// produced it, if one sits next to it.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sum = verify_input(path)?;
        self.inputs.insert(path.display().to_string(), sum);
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        let sum = io::sha256_file(path)?;
        self.artifacts.insert(path.display().to_string(), sum);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

/// `<artifact>.manifest.json`.
pub fn sidecar(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

/// Fails with [`Error::Io`] if `path` is missing and with
/// [`Error::Checksum`] if its sidecar manifest lists a different digest.
pub fn verify_input(path: &Path) -> Result<String> {
    let found = io::sha256_file(path)?;
    let side = sidecar(path);
    if side.exists() {
        let m: Manifest = io::read_json(&side)?;
        let file_name = path.file_name().map(|n| n.to_string_lossy().to_string());
        let expected = m.artifacts.iter().find(|(p, _)| {
            Path::new(p).file_name().map(|n| n.to_string_lossy().to_string()) == file_name
        });
        if let Some((_, expected)) = expected {
            if *expected != found {
                return Err(Error::Checksum {
                    path: path.display().to_string(),
                    expected: expected.clone(),
                    found,
                });
            }
        }
    }
    Ok(found)
}
