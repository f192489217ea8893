use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Provenance record written once per output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Paths relative to the directory holding the manifest.
    pub artifacts: Vec<String>,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Collects artifacts for one output directory and writes its manifest.
pub struct ManifestWriter {
    dir: PathBuf,
    command: String,
    config_hash: String,
    seed: u64,
    artifacts: Vec<String>,
    started: Instant,
}

impl ManifestWriter {
    pub fn new(dir: &Path, command: &str, config_hash: &str, seed: u64) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            artifacts: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Registers `path`, which must exist under the output directory.
    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(&self.dir).unwrap_or(path);
        if !path.exists() {
            bail!("artifact {} was not written", path.display());
        }
        self.artifacts.push(rel.to_string_lossy().into_owned());
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.artifacts.sort();
        self.artifacts.dedup();
        let m = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: self.command,
            config_hash: self.config_hash,
            seed: self.seed,
            artifacts: self.artifacts,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&m)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(m)
    }
}
