use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::to_pretty;
use crate::{io, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation: resolved configuration, inputs, and a
/// SHA-256 digest of every file written (paths relative to the out dir).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub digests: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config,
            inputs: Vec::new(),
            digests: BTreeMap::new(),
        }
    }

    /// Digests a file already written below `out`.
    pub fn record_file(&mut self, out: &Path, rel: &str) -> Result<()> {
        let digest = io::file_digest(&out.join(rel))?;
        self.digests.insert(rel.to_string(), digest);
        Ok(())
    }

    pub fn record_bytes(&mut self, rel: &str, bytes: &[u8]) {
        self.digests.insert(rel.to_string(), io::sha256_hex(bytes));
    }

    /// Written last and atomically: its presence marks a complete run.
    pub fn write(&self, out: &Path) -> Result<()> {
        io::write_atomic(&out.join(MANIFEST_FILE), to_pretty(self).as_bytes())
    }

    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        serde_json::from_str(&io::read_to_string(&path)?).map_err(|e| crate::CliError::Malformed {
            path,
            message: e.to_string(),
        })
    }
}
