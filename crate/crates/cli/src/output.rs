//! Run directories: the resolved config, produced files and their digests.

use std::path::{Path, PathBuf};

use clickprobe::config::RunConfig;
use clickprobe::data::write_bytes;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.toml";
pub const ARTIFACTS_FILE: &str = "artifacts.json";

#[derive(Serialize)]
struct Artifact {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a str,
    artifacts: Vec<Artifact>,
}

/// Collects the files one subcommand writes under its output directory.
pub struct RunDir {
    root: PathBuf,
    command: &'static str,
    produced: Vec<PathBuf>,
}

impl RunDir {
    /// Creates the directory and writes the resolved config.
    pub fn create(root: &Path, command: &'static str, cfg: &RunConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let text = cfg.to_toml();
        write_bytes(&root.join(CONFIG_FILE), text.as_bytes())?;
        log::info!("resolved config for {command}:\n{text}");
        Ok(RunDir { root: root.to_path_buf(), command, produced: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        write_bytes(&p, bytes)?;
        self.record(&p);
        Ok(p)
    }

    /// Registers a file written by other means.
    pub fn record(&mut self, path: &Path) {
        self.produced.push(path.to_path_buf());
    }

    pub fn finish(self) -> Result<(), CliError> {
        let mut artifacts = Vec::new();
        for p in &self.produced {
            let bytes = std::fs::read(p).map_err(|e| CliError::io(p, e))?;
            let rel = p.strip_prefix(&self.root).unwrap_or(p);
            artifacts.push(Artifact {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
            });
        }
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let m = Manifest { command: self.command, config: CONFIG_FILE, artifacts };
        let json = serde_json::to_string_pretty(&m).expect("serializable");
        write_bytes(&self.root.join(ARTIFACTS_FILE), json.as_bytes())?;
        Ok(())
    }
}
