//! Run manifests: the fully resolved invocation plus hashes of every output,
//! so a run can be replayed and checked bit-for-bit.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::Invocation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub invocation: Invocation,
    pub seed: Option<u64>,
    pub build: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<OutputFile>,
    pub duration_s: f64,
}

pub fn build_id() -> String {
    format!("lfvg {} ({})", env!("CARGO_PKG_VERSION"), option_env!("LFVG_BUILD_ID").unwrap_or("unversioned build"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn hash_outputs(paths: &[PathBuf]) -> Result<Vec<OutputFile>> {
    paths.iter().map(|p| Ok(OutputFile { path: p.clone(), sha256: sha256_file(p)? })).collect()
}

/// Temporary sibling plus rename, so a manifest is either complete or absent.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing manifest {}", path.display()))
    }
}
