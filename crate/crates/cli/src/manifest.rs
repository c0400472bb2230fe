use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use mvre_core::Error;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<FileDigest, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one command: every resolved flag, the effective configuration
/// and digests of what went in.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    /// Flag name → value, defaults included; also written as `run.conf`.
    pub flags: Vec<(String, String)>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            tool: "mvre",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            flags: Vec::new(),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    /// `key = value` lines replayable through `--config`.
    pub fn config_file(&self) -> String {
        let mut out = format!("# {} {}\n", self.tool, self.command);
        for (k, v) in &self.flags {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), Error> {
        let json = serde_json::to_string_pretty(self)?;
        crate::write_file(&dir.join("manifest.json"), json.as_bytes())?;
        crate::write_file(&dir.join("run.conf"), self.config_file().as_bytes())
    }
}
