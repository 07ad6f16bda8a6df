//! Run manifests: what ran, with which resolved configuration, on which inputs,
//! producing which outputs. Wall-clock time goes to a separate `timing.json` so
//! the manifest itself stays byte-identical across repeated runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::io;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDigest {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// Keyed by role, e.g. `model/model.bin`.
    pub inputs: BTreeMap<String, InputDigest>,
    /// Keyed by path relative to the output directory.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Serialize)]
struct Timing {
    command: String,
    wall_clock_seconds: f64,
}

/// Collects digests while a command writes its outputs.
pub struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    pub fn start(command: &str, config: &Config, dir: &Path) -> Result<Self> {
        io::ensure_dir(dir)?;
        Ok(Self {
            dir: dir.into(),
            manifest: RunManifest {
                command: command.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                seed: config.seed,
                config: config.entries(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
            started: Instant::now(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let bytes = io::read_bytes(path)?;
        let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        self.manifest.inputs.insert(role.into(), InputDigest { file, sha256: io::sha256_hex(&bytes) });
        Ok(())
    }

    /// Writes `bytes` to `name` under the output directory and records its digest.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            io::ensure_dir(parent)?;
        }
        io::write_atomic(&path, bytes)?;
        self.manifest.outputs.insert(name.into(), io::sha256_hex(bytes));
        Ok(path)
    }

    /// Records a file some other writer already put under the output directory.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let bytes = io::read_bytes(&self.dir.join(name))?;
        self.manifest.outputs.insert(name.into(), io::sha256_hex(&bytes));
        Ok(())
    }

    pub fn finish(self) -> Result<RunManifest> {
        let timing = Timing {
            command: self.manifest.command.clone(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        io::write_atomic(&self.dir.join(TIMING_FILE), &io::to_json_bytes(&timing))?;
        io::write_atomic(&self.dir.join(MANIFEST_FILE), &io::to_json_bytes(&self.manifest))?;
        Ok(self.manifest)
    }
}

/// Loads `dir/manifest.json` and checks every recorded output digest.
pub fn load_verified(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: RunManifest = io::read_json(&path)?;
    for (name, digest) in &manifest.outputs {
        let actual = io::sha256_hex(&io::read_bytes(&dir.join(name))?);
        if &actual != digest {
            return Err(CliError::Corrupt { path: dir.join(name), message: "digest differs from the run manifest".into() });
        }
    }
    Ok(manifest)
}
