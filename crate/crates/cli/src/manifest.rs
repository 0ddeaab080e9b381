use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub fate: String,
    pub dataset_format: u32,
    pub checkpoint_format: u32,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the resolved configuration as JSON.
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
    pub versions: Versions,
    pub wall_time_secs: f64,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

/// Collects written files and emits the manifest.
pub struct Run {
    command: String,
    out: PathBuf,
    started: Instant,
    config_hash: Option<String>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
}

impl Run {
    pub fn start(command: &str, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            command: command.into(),
            out: out.to_path_buf(),
            started: Instant::now(),
            config_hash: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        self.config_hash = Some(sha256_bytes(&serde_json::to_vec(config)?));
        Ok(())
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Writes `bytes` to `name` under the output directory.
    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.produced(name);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Registers a file written by other means.
    pub fn produced(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.into());
        }
    }

    pub fn finish(self) -> Result<RunManifest> {
        let inputs = self
            .inputs
            .iter()
            .map(|p| {
                Ok(FileDigest {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let outputs = self
            .outputs
            .iter()
            .map(|name| {
                Ok(FileDigest {
                    path: name.clone(),
                    sha256: sha256_file(&self.out.join(name))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command.clone(),
            config_hash: self.config_hash,
            seed: self.seed,
            inputs,
            outputs,
            versions: Versions {
                fate: env!("CARGO_PKG_VERSION").into(),
                dataset_format: 1,
                checkpoint_format: 1,
            },
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = self.out.join(format!("{}.manifest.json", self.command));
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}
