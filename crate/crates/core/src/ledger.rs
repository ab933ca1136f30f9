//! Provenance ledger: every artifact written by the pipeline is recorded with
//! its content hash and the hashes of the artifacts it was built from.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: PathBuf,
    pub sha256: String,
    /// Input artifact name to the hash it had when this one was written.
    pub inputs: BTreeMap<String, String>,
    pub created_unix: u64,
    pub tool_version: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentLedger {
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl ExperimentLedger {
    /// A missing file is an empty ledger.
    pub fn load(path: &Path) -> Result<Self> {
        match fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Hashes of `names` after checking the chain: each file exists, matches
    /// its recorded hash, and was built from the current version of every
    /// recorded input.
    pub fn verify(&self, names: &[&str]) -> Result<BTreeMap<String, String>> {
        let mut missing = Vec::new();
        let mut stale = Vec::new();
        let mut out = BTreeMap::new();
        for &name in names {
            let Some(rec) = self.artifacts.get(name) else {
                missing.push(format!("{name}: not recorded in the ledger"));
                continue;
            };
            if !rec.path.exists() {
                missing.push(format!("{name}: {} does not exist", rec.path.display()));
                continue;
            }
            let now = file_hash(&rec.path)?;
            if now != rec.sha256 {
                stale.push(format!("{name} ({}) changed since it was recorded", rec.path.display()));
            }
            for (input, hash) in &rec.inputs {
                match self.artifacts.get(input) {
                    Some(up) if &up.sha256 == hash => {}
                    Some(_) => stale.push(format!("{name} was built from an older {input}")),
                    None => stale.push(format!("{name} was built from {input}, which is no longer recorded")),
                }
            }
            out.insert(name.to_string(), now);
        }
        if !missing.is_empty() {
            return Err(Error::Missing(missing));
        }
        if !stale.is_empty() {
            return Err(Error::Stale(stale));
        }
        Ok(out)
    }

    /// Hashes of `names` without any consistency check.
    pub fn current(&self, names: &[&str]) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        let mut missing = Vec::new();
        for &name in names {
            match self.artifacts.get(name) {
                Some(rec) if rec.path.exists() => {
                    out.insert(name.to_string(), file_hash(&rec.path)?);
                }
                Some(rec) => missing.push(format!("{name}: {} does not exist", rec.path.display())),
                None => missing.push(format!("{name}: not recorded in the ledger")),
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(Error::Missing(missing))
        }
    }

    pub fn record(&mut self, name: &str, path: &Path, inputs: BTreeMap<String, String>) -> Result<()> {
        let rec = ArtifactRecord {
            path: path.to_path_buf(),
            sha256: file_hash(path)?,
            inputs,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            tool_version: TOOL_VERSION.to_string(),
        };
        self.artifacts.insert(name.to_string(), rec);
        Ok(())
    }
}

/// Advisory lock on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

pub const LOCK_FILE: &str = ".ltsfs.lock";

impl DirLock {
    pub fn acquire(dir: &Path, force: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        if force {
            let _ = fs::remove_file(&path);
        }
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Input(format!(
                "{} is locked by another invocation (remove {} or pass --force)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
