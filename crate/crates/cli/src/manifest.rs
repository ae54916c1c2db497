use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use tsjoint::Result;

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(digest(&std::fs::read(path)?))
}

#[derive(Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one invocation, written to stderr when the command finishes.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Hash of the arguments and the contents of every input file.
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub wall_clock_ms: f64,
    pub outputs: Vec<FileDigest>,
}

pub struct Recorder {
    command: String,
    seed: u64,
    hasher: Sha256,
    start: Instant,
    outputs: Vec<FileDigest>,
}

impl Recorder {
    pub fn new(command: &str, args: &[String], seed: u64) -> Self {
        let mut hasher = Sha256::new();
        for a in args {
            hasher.update(a.as_bytes());
            hasher.update([0u8]);
        }
        Self {
            command: command.to_owned(),
            seed,
            hasher,
            start: Instant::now(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.hasher.update(path.to_string_lossy().as_bytes());
        self.hasher.update(Sha256::digest(&bytes));
        Ok(())
    }

    pub fn output_file(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: file_digest(path)?,
        });
        Ok(())
    }

    /// Writes `bytes` to `path`, or stdout when `path` is `None`.
    pub fn emit(&mut self, path: Option<&PathBuf>, bytes: &[u8]) -> Result<()> {
        match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                std::fs::write(p, bytes)?;
            }
            None => std::io::stdout().lock().write_all(bytes)?,
        }
        self.outputs.push(FileDigest {
            path: path.map_or("-".into(), |p| p.display().to_string()),
            sha256: digest(bytes),
        });
        Ok(())
    }

    pub fn finish(self) -> RunManifest {
        RunManifest {
            command: self.command,
            config_hash: hex::encode(self.hasher.finalize()),
            seed: self.seed,
            code_version: env!("CARGO_PKG_VERSION").to_owned(),
            wall_clock_ms: self.start.elapsed().as_secs_f64() * 1e3,
            outputs: self.outputs,
        }
    }
}
