use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

/// Everything needed to rerun a command: `rdcfa --config manifest.json <args>`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector as invoked.
    pub args: Vec<String>,
    /// Resolved flat configuration.
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn begin(command: &str, config: BTreeMap<String, String>, seeds: Vec<u64>) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            config,
            seeds,
            started_at: now(),
            finished_at: None,
            status: "running".into(),
            artifacts: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn finish(&mut self, dir: &Path, status: &str) -> anyhow::Result<()> {
        self.finished_at = Some(now());
        self.status = status.to_string();
        self.write(dir).map(|_| ())
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
