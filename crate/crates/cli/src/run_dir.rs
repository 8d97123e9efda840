//! Artifact names inside a run directory and the per-command metadata file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONFIG: &str = "config.toml";
pub const ENCODER: &str = "encoder.awck";
pub const HEAD: &str = "head.awck";
pub const PRETRAIN_HISTORY: &str = "pretrain_history.csv";
pub const WATERMARK: &str = "watermark.awwm";
pub const MARKED_ENCODER: &str = "marked_encoder.awck";
pub const MARKED_HEAD: &str = "marked_head.awck";
pub const PGD_TRAJECTORY: &str = "pgd_trajectory.csv";
pub const EMBED_HISTORY: &str = "embed_history.csv";
pub const PROBE_CLEAN: &str = "probe_clean.awck";
pub const PROBE_MARKED: &str = "probe_marked.awck";
pub const THRESHOLDS: &str = "thresholds.json";
pub const EFFECTIVENESS: &str = "effectiveness.csv";
pub const ATTACKS: &str = "attacks.csv";
pub const SUMMARY_MD: &str = "summary.md";
pub const SUMMARY_CSV: &str = "summary.csv";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// What a command read and wrote, with content hashes. Contains nothing
/// that varies between identical reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn write_metadata(
        &self,
        command: &str,
        seed: u64,
        config_sha256: String,
        inputs: &[&Path],
        outputs: &[PathBuf],
    ) -> Result<()> {
        // Keys avoid absolute paths so that reruns in another directory
        // produce the same file.
        let key = |p: &Path| match p.strip_prefix(&self.root) {
            Ok(rel) => rel.display().to_string(),
            Err(_) => p
                .file_name()
                .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned()),
        };
        let hash_all = |paths: &[&Path]| -> Result<BTreeMap<String, String>> {
            paths.iter().map(|p| Ok((key(p), sha256_file(p)?))).collect()
        };
        let meta = Metadata {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_sha256,
            inputs: hash_all(inputs)?,
            outputs: hash_all(&outputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?,
        };
        self.write(
            &format!("{command}.meta.json"),
            serde_json::to_string_pretty(&meta)? + "\n",
        )?;
        Ok(())
    }
}
