//! Output files of one subcommand and the manifest written beside them.
//!
//! Outputs are removed again unless the command commits, so a failed run
//! leaves nothing half-written behind.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn file_entry(path: &Path) -> std::io::Result<Value> {
    let bytes = std::fs::read(path)?;
    Ok(json!({
        "path": path.display().to_string(),
        "bytes": bytes.len(),
        "sha256": hex::encode(Sha256::digest(&bytes)),
    }))
}

#[derive(Debug, Default)]
pub struct Outputs {
    written: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> std::io::Result<()> {
        self.written.push(path.to_path_buf());
        std::fs::write(path, bytes)
    }

    /// Write the manifest beside the first output and keep everything.
    pub fn commit(mut self, command: &str, cfg: &RunConfig, inputs: &[PathBuf], extra: Value) -> anyhow::Result<PathBuf> {
        let primary = self.written.first().cloned().ok_or_else(|| anyhow::anyhow!("{command} wrote no outputs"))?;
        let manifest = json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seed": cfg.seed,
            "config_hash": cfg.hash(),
            "config": cfg,
            "inputs": inputs.iter().map(|p| file_entry(p)).collect::<std::io::Result<Vec<_>>>()?,
            "outputs": self.written.iter().map(|p| file_entry(p)).collect::<std::io::Result<Vec<_>>>()?,
            "extra": extra,
        });
        let path = manifest_path(&primary);
        self.write(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        self.committed = true;
        Ok(path)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}
