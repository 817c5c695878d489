//! JSON provenance sidecar written next to every container.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fieldcodec::field::{Dims, Order, Precision};
use fieldcodec::pipeline::{FieldReport, PipelineConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub name: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub deterministic: bool,
    pub jobs: usize,
    pub seed: u64,
    pub dims: Dims,
    pub precision: Precision,
    pub order: Order,
    /// Every pipeline setting, defaults included.
    pub config: PipelineConfig,
    pub inputs: Vec<InputDigest>,
    pub output: PathBuf,
    pub output_sha256: String,
    pub reports: Vec<FieldReport>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// `out.nlz` → `out.manifest.json`.
pub fn manifest_path(container: &Path) -> PathBuf {
    container.with_extension("manifest.json")
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Fails if any input file changed since the manifest was written.
    pub fn verify_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            let now = digest_file(&input.path)?;
            if now != input.sha256 {
                bail!("input `{}` ({}) changed: digest {now} != {}", input.name, input.path.display(), input.sha256);
            }
        }
        Ok(())
    }
}
