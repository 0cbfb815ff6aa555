use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Outcome of a subcommand. Maps to exit codes 0, 1 and 2.
#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Ok,
    /// The run completed its checks and at least one failed, or a solver aborted.
    Failed(String),
    /// Bad configuration, bad arguments or an I/O problem.
    Error(String),
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    pub config_path: Option<String>,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub status: &'static str,
    pub exit_code: u8,
    pub diagnostic: Option<String>,
    pub outputs: Vec<String>,
    /// The configuration after command-line overrides.
    pub config: Option<serde_json::Value>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn new(subcommand: &'static str, threads: Option<usize>) -> Self {
        Self {
            tool: "popflow",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            config_path: None,
            config_sha256: None,
            seed: None,
            threads,
            status: "running",
            exit_code: 0,
            diagnostic: None,
            outputs: Vec::new(),
            config: None,
        }
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn finish(&mut self, status: &Status) {
        let (label, code, diagnostic) = match status {
            Status::Ok => ("ok", 0, None),
            Status::Failed(m) => ("failed", 1, Some(m.clone())),
            Status::Error(m) => ("error", 2, Some(m.clone())),
        };
        self.status = label;
        self.exit_code = code;
        self.diagnostic = diagnostic;
    }

    pub fn write(&self, out: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
