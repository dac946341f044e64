use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Written next to every command's output so a result can be traced back to
/// the exact configuration, checkpoint and seed that produced it.
#[derive(Debug, Serialize)]
pub struct Stamp {
    pub command: String,
    pub version: &'static str,
    pub config_sha256: String,
    pub checkpoint_sha256: Option<String>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
}

impl Stamp {
    pub fn new<C: Serialize>(command: &str, config: &C) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(Stamp {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: hex(&Sha256::digest(serde_json::to_vec(&config)?)),
            checkpoint_sha256: None,
            seed: None,
            config,
        })
    }

    pub fn checkpoint(mut self, path: &Path) -> Result<Self> {
        self.checkpoint_sha256 = Some(file_sha256(path)?);
        Ok(self)
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// `<output>.stamp.json`, or `stamp.json` inside an output directory.
    pub fn write_for(&self, output: &Path) -> Result<PathBuf> {
        let path = if output.is_dir() {
            output.join("stamp.json")
        } else {
            let mut name = output.file_name().unwrap_or_default().to_os_string();
            name.push(".stamp.json");
            output.with_file_name(name)
        };
        std::fs::write(&path, serde_json::to_vec_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
