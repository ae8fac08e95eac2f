//! The `run.json` record written into every output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use xfr_core::io::write_atomic;

pub const RUN_RECORD: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Full argument vector; re-running it reproduces the outputs.
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    /// Resolved configuration, defaults included.
    pub config: serde_json::Value,
    /// Output files relative to the directory.
    pub outputs: Vec<String>,
}

impl RunRecord {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        RunRecord {
            tool: "xfr".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: std::env::args().collect(),
            seed,
            config,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        write_atomic(&dir.join(RUN_RECORD), &json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(RUN_RECORD);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}
