//! The experiment configuration file (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackConfig;
use crate::contrastive::{AugmentConfig, ContrastiveConfig};
use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::models::{ArchConfig, ProbeConfig};
use crate::watermark::{EmbedConfig, WatermarkConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder widths after the input layer; the last is the embedding size.
    pub encoder: Vec<usize>,
    /// Projection-head widths after its input (the embedding).
    pub head: Vec<usize>,
    /// Scale encoder outputs to unit ℓ2 norm.
    pub normalize_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: vec![256, 128, 32],
            head: vec![32, 16],
            normalize_embedding: false,
        }
    }
}

impl ModelConfig {
    pub fn encoder_arch(&self, input_dim: usize) -> ArchConfig {
        let mut dims = vec![input_dim];
        dims.extend(&self.encoder);
        let a = ArchConfig::new(dims, false);
        if self.normalize_embedding {
            a.normalized()
        } else {
            a
        }
    }

    pub fn head_arch(&self) -> ArchConfig {
        let mut dims = vec![self.embed_dim()];
        dims.extend(&self.head);
        ArchConfig::new(dims, false)
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.last().copied().unwrap_or(0)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.encoder.is_empty() || self.encoder.contains(&0) {
            out.push(format!("model.encoder needs positive widths, got {:?}", self.encoder));
        }
        if self.head.len() != 2 || self.head.contains(&0) {
            out.push(format!(
                "model.head needs exactly two positive widths, got {:?}",
                self.head
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// White-box threshold; calibrated when absent.
    pub t_s: Option<f64>,
    /// Black-box threshold; calibrated when absent.
    pub t_c: Option<f64>,
    /// Size of D″; capped at the verify split.
    pub verify_samples: usize,
    /// Size of D*; capped at the downstream test split.
    pub downstream_samples: usize,
    /// Number of chunks each split is cut into for calibration.
    pub calibration_chunks: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            t_s: None,
            t_c: None,
            verify_samples: 1000,
            downstream_samples: 1000,
            calibration_chunks: 5,
        }
    }
}

impl VerifyConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, t) in [("verify.t_s", self.t_s), ("verify.t_c", self.t_c)] {
            if let Some(t) = t {
                if !(t > 0.0 && t.is_finite()) {
                    out.push(format!("{name} must be positive, got {t}"));
                }
            }
        }
        if self.verify_samples == 0 || self.downstream_samples == 0 {
            out.push("verify sample counts must be at least 1".into());
        }
        if self.calibration_chunks == 0 {
            out.push("verify.calibration_chunks must be at least 1".into());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default)]
    pub data: SyntheticConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub watermark: WatermarkConfig,
    #[serde(default)]
    pub embed: EmbedConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default = "AttackConfig::standard_sweep")]
    pub attacks: Vec<AttackConfig>,
}

fn default_output_dir() -> String {
    "runs/default".into()
}


impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: default_output_dir(),
            data: SyntheticConfig::default(),
            model: ModelConfig::default(),
            contrastive: ContrastiveConfig::default(),
            augment: AugmentConfig::default(),
            watermark: WatermarkConfig::default(),
            embed: EmbedConfig::default(),
            probe: ProbeConfig::default(),
            verify: VerifyConfig::default(),
            attacks: AttackConfig::standard_sweep(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; every violated constraint is reported at once.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string().trim().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            out.push(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        out.extend(self.data.problems());
        out.extend(self.model.problems());
        out.extend(self.contrastive.problems("contrastive"));
        out.extend(self.augment.problems());
        out.extend(self.watermark.problems());
        out.extend(self.embed.problems());
        if !(self.probe.learning_rate > 0.0 && self.probe.learning_rate.is_finite()) {
            out.push(format!("probe.learning_rate must be positive, got {}", self.probe.learning_rate));
        }
        out.extend(self.verify.problems());
        for (i, a) in self.attacks.iter().enumerate() {
            out.extend(a.problems(&format!("attacks[{i}]")));
        }
        if self.watermark.key_class >= self.data.key_classes {
            out.push(format!(
                "watermark.key_class {} needs data.key_classes > {}",
                self.watermark.key_class, self.watermark.key_class
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Hex SHA-256 of the resolved configuration text.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
