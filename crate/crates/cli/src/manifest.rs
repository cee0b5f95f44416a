//! Run directories and their single `manifest.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_error, CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

/// Record of one command invocation, written to the root of its output
/// directory. `config` is the fully resolved configuration, so passing the
/// manifest back as `--config` repeats the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub code_version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    /// Failure message when `status` is `failed`.
    pub error: Option<String>,
    /// Files written by the run, relative to its directory.
    pub outputs: Vec<String>,
    pub args: Vec<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            error: None,
            outputs: Vec::new(),
            args: std::env::args().collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: not a run manifest: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, json).map_err(io_error(&path))
    }

    /// Marks the run finished and lists every file under `dir`.
    pub fn finish(&mut self, dir: &Path, outcome: &Result<()>) -> Result<()> {
        self.finished_at = Some(now());
        match outcome {
            Ok(()) => self.status = RunStatus::Completed,
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(e.to_string());
            }
        }
        self.outputs = list_files(dir)?
            .into_iter()
            .filter(|p| p != MANIFEST_FILE)
            .collect();
        self.write(dir)
    }
}

/// Sorted relative paths (with `/` separators) of all files below `dir`.
pub fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(io_error(dir))? {
            let path = entry.map_err(io_error(dir))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays below root");
                let parts: Vec<String> = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect();
                out.push(parts.join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Makes `out` ready for a fresh run. An existing non-empty directory is an
/// error unless `force` is set and it holds a previous run's manifest, in
/// which case it is cleared. Directories without a manifest are never
/// deleted.
pub fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::config(format!(
                "--out {} exists and is not a directory",
                out.display()
            )));
        }
        let empty = std::fs::read_dir(out)
            .map_err(io_error(out))?
            .next()
            .is_none();
        if !empty {
            if !force {
                return Err(CliError::config(format!(
                    "--out {} already holds a run; pass --force to replace it",
                    out.display()
                )));
            }
            if !out.join(MANIFEST_FILE).is_file() {
                return Err(CliError::config(format!(
                    "--out {} is not empty and has no {MANIFEST_FILE}; refusing to clear it even with --force",
                    out.display()
                )));
            }
            std::fs::remove_dir_all(out).map_err(io_error(out))?;
        }
    }
    std::fs::create_dir_all(out).map_err(io_error(out))
}

/// Absolute form of `path` for manifests, without touching the filesystem.
pub fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}
