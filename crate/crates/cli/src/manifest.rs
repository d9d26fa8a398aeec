//! Per-run manifests: what ran, with which configuration and inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: &'static str,
    pub config: serde_json::Value,
    /// Path to sha256 of each file read.
    pub inputs: BTreeMap<String, String>,
    /// Path to sha256 of each file written.
    pub outputs: BTreeMap<String, String>,
    pub started_at: String,
    pub durations_ms: BTreeMap<String, u128>,
    pub exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Collects manifest fields while a command runs.
pub struct Recorder {
    manifest: RunManifest,
    stage_start: Instant,
    total_start: Instant,
}

impl Recorder {
    pub fn new(command: &str, argv: &[String], config: serde_json::Value) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                argv: argv.to_vec(),
                tool_version: env!("CARGO_PKG_VERSION"),
                config,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                started_at: chrono::Utc::now().to_rfc3339(),
                durations_ms: BTreeMap::new(),
                exit_code: 0,
                error: None,
            },
            stage_start: Instant::now(),
            total_start: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.manifest.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.manifest.outputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Records the time since the previous stage under `name`.
    pub fn stage(&mut self, name: &str) {
        self.manifest
            .durations_ms
            .insert(name.to_string(), self.stage_start.elapsed().as_millis());
        self.stage_start = Instant::now();
    }

    /// Writes the manifest into `dir` and returns its path. The file name
    /// depends only on the command, arguments, configuration and inputs.
    pub fn finish(mut self, dir: &Path, exit_code: i32, error: Option<String>) -> Result<PathBuf> {
        self.manifest
            .durations_ms
            .insert("total".into(), self.total_start.elapsed().as_millis());
        self.manifest.exit_code = exit_code;
        self.manifest.error = error;
        let mut h = Sha256::new();
        h.update(self.manifest.command.as_bytes());
        for a in &self.manifest.argv {
            h.update(a.as_bytes());
            h.update([0]);
        }
        h.update(self.manifest.config.to_string().as_bytes());
        for (p, d) in &self.manifest.inputs {
            h.update(p.as_bytes());
            h.update(d.as_bytes());
        }
        let id = hex::encode(&h.finalize()[..6]);
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("{}-{id}.json", self.manifest.command.replace(' ', "-")));
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
