//! Run directories: `<output_dir>/<timestamp>-<command>-<config hash>/`,
//! each holding the resolved config and the content hashes of its inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rfssl_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

/// SHA-256 over a file, or over every file below a directory (relative path
/// and contents, in sorted path order).
pub fn content_hash(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        for rel in files {
            let bytes = fs::read(path.join(&rel)).map_err(|e| Error::io(path.join(&rel), e))?;
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    } else {
        h.update(fs::read(path).map_err(|e| Error::io(path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("walk stays below root").to_path_buf());
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    run_id: &'a str,
    command: &'a str,
    started_utc: String,
    config_hash: &'a str,
    inputs: &'a BTreeMap<String, String>,
    tool_version: &'static str,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub id: String,
    pub path: PathBuf,
}

impl RunDir {
    /// Creates a fresh run directory and writes `config.json` and `run.json`.
    /// `inputs` maps a role (such as `data`) to the path whose content hash
    /// is recorded.
    pub fn create(root: &Path, command: &str, cfg: &ExperimentConfig, inputs: &[(&str, &Path)]) -> Result<Self> {
        let now = chrono::Utc::now();
        let hash = cfg.hash()?;
        let base = format!("{}-{command}-{}", now.format("%Y%m%dT%H%M%SZ"), &hash[..12]);
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let (id, path) = (0..)
            .map(|k| if k == 0 { base.clone() } else { format!("{base}-{k}") })
            .map(|id| {
                let p = root.join(&id);
                (id, p)
            })
            .find(|(_, p)| !p.exists())
            .expect("some suffix is free");
        fs::create_dir(&path).map_err(|e| Error::io(&path, e))?;

        let mut hashes = BTreeMap::new();
        for (role, p) in inputs {
            hashes.insert(role.to_string(), content_hash(p)?);
        }
        let cfg_path = path.join("config.json");
        fs::write(&cfg_path, cfg.to_json()? + "\n").map_err(|e| Error::io(&cfg_path, e))?;
        let record = RunRecord {
            run_id: &id,
            command,
            started_utc: now.to_rfc3339(),
            config_hash: &hash,
            inputs: &hashes,
            tool_version: env!("CARGO_PKG_VERSION"),
        };
        let run_path = path.join("run.json");
        fs::write(&run_path, serde_json::to_string_pretty(&record)? + "\n").map_err(|e| Error::io(&run_path, e))?;
        Ok(RunDir { id, path })
    }
}
