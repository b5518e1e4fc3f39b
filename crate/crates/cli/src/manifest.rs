use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation and the files it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub started_at: String,
    pub finished_at: String,
    /// File name (relative to `out_dir`) → sha256 hex digest.
    pub artifacts: BTreeMap<String, String>,
    /// Command-specific results, e.g. final loss or parameter count.
    pub summary: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(
        command: &str,
        config_path: Option<&Path>,
        config: BTreeMap<String, String>,
        seed: u64,
        out_dir: &Path,
    ) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config,
            seed,
            out_dir: out_dir.to_path_buf(),
            started_at: now(),
            finished_at: String::new(),
            artifacts: BTreeMap::new(),
            summary: BTreeMap::new(),
        }
    }

    /// Writes `contents` to `out_dir/name` and records its checksum.
    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
        self.artifacts.insert(name.to_string(), sha256_file(&path)?);
        Ok(path)
    }

    pub fn note(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.summary.insert(key.to_string(), value.into());
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.finished_at = now();
        let path = self.out_dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self)?;
        fs::write(&path, json + "\n").with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}
