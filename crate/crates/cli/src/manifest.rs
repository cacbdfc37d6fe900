//! `run.json`: what produced an output directory and from which inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub command: &'a str,
    pub version: &'static str,
    pub argv: Vec<String>,
    pub config: &'a C,
    pub seed: u64,
    /// Input path → (file → sha256).
    pub inputs: BTreeMap<String, BTreeMap<String, String>>,
    /// Output file relative to the directory → sha256.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Hashes every file under `root` (or `root` itself), skipping manifests.
pub fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if root.is_file() {
        out.insert(file_name(root), sha256_file(root)?);
        return Ok(out);
    }
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                let rel = p.strip_prefix(root).unwrap_or(&p);
                out.insert(rel.to_string_lossy().replace('\\', "/"), sha256_file(&p)?);
            }
        }
    }
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn write<C: Serialize>(
    out_dir: &Path,
    command: &str,
    config: &C,
    seed: u64,
    inputs: &[&Path],
    started_unix: u64,
) -> Result<()> {
    let inputs = inputs
        .iter()
        .map(|p| Ok((p.display().to_string(), hash_tree(p)?)))
        .collect::<Result<_>>()?;
    let manifest = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        argv: std::env::args().collect(),
        config,
        seed,
        inputs,
        outputs: hash_tree(out_dir)?,
        started_unix,
        finished_unix: now_unix(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", path.display()))
}
