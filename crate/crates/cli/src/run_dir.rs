//! Run directories: one live process each, guarded by a lock file, with a
//! manifest that maps every config hash to the artifacts it produced.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use apdm_core::config::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

pub const LOCK_FILE: &str = ".apdm.lock";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: BTreeMap<String, RunEntry>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct RunEntry {
    /// Copy of the config, relative to the run directory.
    pub config: String,
    pub artifacts: BTreeMap<String, Artifact>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact {
    pub stage: String,
    pub sha256: String,
}

pub struct RunDir {
    pub path: PathBuf,
    config_hash: String,
    lock: PathBuf,
}

impl RunDir {
    /// Creates the directory if needed, takes the lock, and stores a copy
    /// of `cfg` named after its hash.
    pub fn open(cfg: &ExperimentConfig) -> Result<Self, Failure> {
        let path = cfg.output_dir.clone();
        fs::create_dir_all(&path).map_err(|e| Failure::Domain(format!("cannot create {}: {e}", path.display())))?;
        let lock = acquire_lock(&path)?;
        let run = RunDir {
            path,
            config_hash: cfg.hash(),
            lock,
        };
        let name = run.config_name();
        fs::write(run.path.join(&name), cfg.to_toml_string()).map_err(io_failure)?;
        run.update_manifest(|entry| entry.config = name)?;
        Ok(run)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn config_name(&self) -> String {
        format!("config-{}.toml", &self.config_hash[..16])
    }

    /// Records `names` (files inside the run directory) as produced by
    /// `stage` under the current config.
    pub fn record(&self, stage: &str, names: &[String]) -> Result<(), Failure> {
        let mut hashed = Vec::with_capacity(names.len());
        for name in names {
            let bytes = fs::read(self.file(name)).map_err(io_failure)?;
            hashed.push((name.clone(), hex::encode(Sha256::digest(&bytes))));
        }
        self.update_manifest(|entry| {
            for (name, sha256) in hashed {
                entry.artifacts.insert(
                    name,
                    Artifact {
                        stage: stage.to_string(),
                        sha256,
                    },
                );
            }
        })
    }

    fn update_manifest(&self, f: impl FnOnce(&mut RunEntry)) -> Result<(), Failure> {
        let path = self.file(MANIFEST_FILE);
        let mut manifest: Manifest = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| Failure::Domain(format!("unreadable manifest {}: {e}", path.display())))?,
            Err(_) => Manifest::default(),
        };
        f(manifest.runs.entry(self.config_hash.clone()).or_default());
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest is always serializable");
        text.push('\n');
        fs::write(&path, text).map_err(io_failure)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub fn io_failure(e: std::io::Error) -> Failure {
    Failure::Domain(format!("io error: {e}"))
}

fn acquire_lock(dir: &Path) -> Result<PathBuf, Failure> {
    let path = dir.join(LOCK_FILE);
    for _ in 0..2 {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                write!(f, "{}", std::process::id()).map_err(io_failure)?;
                return Ok(path);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&path).unwrap_or_default();
                if lock_is_live(holder.trim()) {
                    return Err(Failure::Domain(format!(
                        "{} is locked by live process {} ({})",
                        dir.display(),
                        holder.trim(),
                        path.display()
                    )));
                }
                fs::remove_file(&path).map_err(io_failure)?;
            }
            Err(e) => return Err(io_failure(e)),
        }
    }
    Err(Failure::Domain(format!("could not take the lock {}", path.display())))
}

/// A lock is stale only when it names a process that provably no longer
/// exists; anything unreadable counts as live.
fn lock_is_live(holder: &str) -> bool {
    let Ok(pid) = holder.parse::<u32>() else {
        return true;
    };
    let proc_root = Path::new("/proc");
    if !proc_root.is_dir() {
        return true;
    }
    proc_root.join(pid.to_string()).exists()
}
