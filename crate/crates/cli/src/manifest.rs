//! Per-run manifest: resolved config, its hash, seeds, versions and file
//! digests.

use std::path::Path;

use gpdyn::dataio::write_atomic;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{stage_seed, ExperimentConfig, Stage};
use crate::{CliError, Context};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub root: u64,
    pub data: u64,
    pub gp: u64,
    pub inference: u64,
    pub prediction: u64,
}

impl Seeds {
    pub fn from_root(root: u64) -> Self {
        Self {
            root,
            data: stage_seed(root, Stage::Data),
            gp: stage_seed(root, Stage::Gp),
            inference: stage_seed(root, Stage::Inference),
            prediction: stage_seed(root, Stage::Prediction),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub gpdyn_version: String,
    pub cli_version: String,
    pub config: String,
    pub config_sha256: String,
    pub seeds: Seeds,
    pub inputs: Vec<FileDigest>,
    /// Every file the run wrote apart from the manifest and `timing.json`.
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn digest_file(path: &Path, label: String) -> Result<FileDigest, CliError> {
    let bytes = std::fs::read(path)
        .map_err(gpdyn::Error::from)
        .context(|| format!("hashing {}", path.display()))?;
    Ok(FileDigest {
        path: label,
        sha256: sha256_hex(&bytes),
    })
}

/// Write `manifest.json` into `dir`, hashing `outputs` (relative to `dir`).
pub fn write(
    dir: &Path,
    command: &str,
    args: &[String],
    cfg: &ExperimentConfig,
    inputs: &[&Path],
    outputs: &[String],
) -> Result<(), CliError> {
    let config = cfg.to_toml();
    let manifest = Manifest {
        command: command.to_string(),
        args: args.iter().skip(1).cloned().collect(),
        gpdyn_version: gpdyn::VERSION.to_string(),
        cli_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: sha256_hex(config.as_bytes()),
        config,
        seeds: Seeds::from_root(cfg.seed),
        inputs: inputs
            .iter()
            .map(|p| digest_file(p, p.display().to_string()))
            .collect::<Result<_, _>>()?,
        outputs: outputs
            .iter()
            .map(|name| digest_file(&dir.join(name), name.clone()))
            .collect::<Result<_, _>>()?,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), text.as_bytes()).context(|| "writing manifest".into())
}
