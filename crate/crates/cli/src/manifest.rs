use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Record of one command invocation, printed to stdout and written next to
/// the outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// SHA-256 over the input files (relative path and contents, sorted).
    pub input_hash: String,
    pub start_unix: f64,
    pub end_unix: f64,
    pub outputs: Vec<PathBuf>,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn collect_files(root: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if root.is_file() {
        out.push(root.to_path_buf());
        return Ok(());
    }
    for entry in fs::read_dir(root)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if !is_manifest(&p) {
            out.push(p);
        }
    }
    Ok(())
}

pub const MANIFEST_NAME: &str = "run_manifest.json";

fn is_manifest(p: &Path) -> bool {
    p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n == MANIFEST_NAME || n.ends_with(".manifest.json"))
}

/// Manifest location for a command whose output is a single file.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

/// Content hash of a set of files or directory trees. Manifests inside the
/// trees are skipped so re-running a command does not change the hash.
pub fn hash_paths(paths: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for root in paths {
        let mut files = Vec::new();
        collect_files(root, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0u8]);
            h.update(fs::read(&f)?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

impl RunManifest {
    pub fn start(command: &str, seed: u64, inputs: &[&Path]) -> Result<Self> {
        Ok(RunManifest {
            command: command.into(),
            config: serde_json::Value::Null,
            seed,
            input_hash: hash_paths(inputs)?,
            start_unix: now_unix(),
            end_unix: 0.0,
            outputs: Vec::new(),
        })
    }

    /// Stamps the end time, prints the manifest and writes it to `path`.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.end_unix = now_unix();
        let text = serde_json::to_string_pretty(&self)?;
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        fs::write(path, &text)?;
        println!("{text}");
        Ok(())
    }
}
