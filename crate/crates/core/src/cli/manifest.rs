use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{Error, Result};

/// Record of one subcommand invocation. Timestamps live only here, so every
/// other artifact stays byte-reproducible.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub args: Vec<String>,
    pub config_digest: String,
    pub master_seed: u64,
    pub started_at: f64,
    pub finished_at: f64,
    pub artifacts: Vec<PathBuf>,
    pub version: &'static str,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn start(subcommand: &str, config_digest: String, master_seed: u64) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            args: std::env::args().collect(),
            config_digest,
            master_seed,
            started_at: now(),
            finished_at: 0.0,
            artifacts: Vec::new(),
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    pub fn add(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    /// Writes `manifest-<subcommand>.json` into `dir` and returns its path.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_at = now();
        let path = dir.join(format!("manifest-{}.json", self.subcommand));
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
