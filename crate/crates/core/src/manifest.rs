//! Reproducibility record written next to every artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::hex_digest;
use crate::error::{Error, Result};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Fully resolved configuration; accepted back by `--config`.
    pub config: Value,
    pub seed: Option<u64>,
    /// File hashes of checkpoints read or written, by role.
    pub checkpoint_hashes: BTreeMap<String, String>,
    /// File hashes of corpora read or written, by role.
    pub corpus_hashes: BTreeMap<String, String>,
    /// Hashes of every output file, by path.
    pub outputs: BTreeMap<String, String>,
    pub artifact_version: String,
    pub timestamp: String,
}

pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    Ok(hex_digest(
        &std::fs::read(path).map_err(|e| Error::io(path, e))?,
    ))
}

impl RunManifest {
    pub fn new(subcommand: &str, config: Value, seed: Option<u64>) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            config,
            seed,
            checkpoint_hashes: BTreeMap::new(),
            corpus_hashes: BTreeMap::new(),
            outputs: BTreeMap::new(),
            artifact_version: ARTIFACT_VERSION.into(),
            timestamp: humantime::format_rfc3339_seconds(SystemTime::now()).to_string(),
        }
    }

    pub fn checkpoint(&mut self, role: &str, path: impl AsRef<Path>) -> Result<&mut Self> {
        self.checkpoint_hashes.insert(role.into(), file_hash(path)?);
        Ok(self)
    }

    pub fn corpus(&mut self, role: &str, path: impl AsRef<Path>) -> Result<&mut Self> {
        self.corpus_hashes.insert(role.into(), file_hash(path)?);
        Ok(self)
    }

    pub fn output(&mut self, path: impl AsRef<Path>) -> Result<&mut Self> {
        let path = path.as_ref();
        self.outputs
            .insert(path.display().to_string(), file_hash(path)?);
        Ok(self)
    }

    /// Where the manifest of `artifact` lives: `dir/manifest.json` for a
    /// directory, `file.manifest.json` otherwise.
    pub fn path_for(artifact: impl AsRef<Path>) -> PathBuf {
        let a = artifact.as_ref();
        if a.is_dir() {
            a.join("manifest.json")
        } else {
            let mut s = a.as_os_str().to_owned();
            s.push(".manifest.json");
            PathBuf::from(s)
        }
    }

    pub fn write_for(&self, artifact: impl AsRef<Path>) -> Result<PathBuf> {
        let path = Self::path_for(artifact);
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
