use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;

pub const MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one run. Paths are recorded relative to their input or
/// output root and nothing time-dependent is stored, so identical runs
/// produce identical manifests.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub config: &'a PipelineConfig,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn files_under(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != MANIFEST) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn hash_tree(root: &Path) -> anyhow::Result<Vec<FileHash>> {
    if root.is_file() {
        let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![FileHash {
            path: name,
            sha256: sha256_file(root)?,
        }]);
    }
    files_under(root)?
        .into_iter()
        .map(|p| {
            Ok(FileHash {
                path: p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(&p)?,
            })
        })
        .collect()
}

pub struct ManifestInfo<'a> {
    pub command: &'a str,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub config: &'a PipelineConfig,
}

/// Hashes the inputs and `outputs` (recorded relative to `dir`), then writes
/// the manifest into `dir`.
pub fn write(dir: &Path, info: &ManifestInfo, inputs: &[&Path], outputs: &[PathBuf]) -> anyhow::Result<PathBuf> {
    let mut hashed_inputs = Vec::new();
    for p in inputs {
        hashed_inputs.extend(hash_tree(p)?);
    }
    let mut hashed_outputs = Vec::new();
    let mut sorted = outputs.to_vec();
    sorted.sort();
    sorted.dedup();
    for p in &sorted {
        hashed_outputs.push(FileHash {
            path: p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/"),
            sha256: sha256_file(p)?,
        });
    }
    let manifest = RunManifest {
        tool: "notegate",
        version: env!("CARGO_PKG_VERSION"),
        command: info.command,
        seed: info.seed,
        threads: info.threads,
        config: info.config,
        inputs: hashed_inputs,
        outputs: hashed_outputs,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let path = dir.join(MANIFEST);
    fs::write(&path, text)?;
    Ok(path)
}
