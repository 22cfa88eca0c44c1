//! Atomic artifact writes and the per-run `manifest.json`.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// One output of a run, held in memory until the run succeeds.
pub struct Artifact {
    pub name: String,
    pub kind: &'static str,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn json<T: Serialize>(name: impl Into<String>, kind: &'static str, value: &T) -> Result<Self, CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        bytes.push(b'\n');
        Ok(Self {
            name: name.into(),
            kind,
            bytes,
        })
    }

    pub fn with<F>(name: impl Into<String>, kind: &'static str, write: F) -> Result<Self, CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> regnoise::Result<()>,
    {
        let mut bytes = Vec::new();
        write(&mut bytes)?;
        Ok(Self {
            name: name.into(),
            kind,
            bytes,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub kind: String,
    pub sha256: String,
    pub config_hash: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'a str,
    pub config_hash: String,
    pub config: &'a C,
    pub artifacts: Vec<ArtifactEntry>,
    pub checks: &'a [Check],
    pub pass: bool,
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Write `bytes` to `dir/name` through a temporary file in the same directory.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(dir.join(name)).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

/// Write every artifact and then the manifest listing them.
pub fn write_run<C: Serialize>(
    dir: &Path,
    subcommand: &str,
    config: &C,
    config_hash: &str,
    artifacts: &[Artifact],
    checks: &[Check],
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        write_atomic(dir, &a.name, &a.bytes)?;
        entries.push(ArtifactEntry {
            path: a.name.clone(),
            kind: a.kind.to_string(),
            sha256: hex(&a.bytes),
            config_hash: config_hash.to_string(),
        });
    }
    let manifest = Manifest {
        tool: "regnoise",
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        config_hash: config_hash.to_string(),
        config,
        artifacts: entries,
        checks,
        pass: checks.iter().all(|c| c.pass),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(dir, "manifest.json", &bytes)
}
