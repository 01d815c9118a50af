//! Run manifests: one JSON file per artifact-producing command, recording
//! the command, its resolved config, input digests and outputs.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    /// Manifests of the inputs, when they have one.
    pub parents: Vec<String>,
    pub outputs: Vec<String>,
    /// Command-specific results (ingest counts, calibrated δ, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<serde_json::Value>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// `ticks.csv` → `ticks.csv.manifest.json`.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            tool_version: TOOL_VERSION.into(),
            seed,
            config: serde_json::to_value(config).map_err(|e| CliError::Invariant(e.to_string()))?,
            inputs: Vec::new(),
            parents: Vec::new(),
            outputs: Vec::new(),
            summary: None,
        })
    }

    /// Records an input's digest, and its manifest if it has one.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest { path: display(path), sha256: sha256_file(path)? });
        let parent = manifest_path(path);
        if parent.exists() {
            self.parents.push(display(&parent));
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(display(path));
    }

    pub fn with_summary<S: Serialize>(mut self, summary: &S) -> Result<Self> {
        self.summary = Some(serde_json::to_value(summary).map_err(|e| CliError::Invariant(e.to_string()))?);
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// True when the recorded inputs still hash the same and every output
    /// exists: the command would reproduce what is already on disk.
    pub fn is_current(&self) -> bool {
        self.inputs
            .iter()
            .all(|d| sha256_file(Path::new(&d.path)).is_ok_and(|h| h == d.sha256))
            && self.outputs.iter().all(|o| Path::new(o).exists())
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Invariant(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
