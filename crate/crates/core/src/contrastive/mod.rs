//! Self-supervised pretraining: augmentations, the SimCLR and MoCo losses,
//! and the training loop shared by pretraining, watermark embedding and
//! fine-tuning attacks.

mod augment;
mod loss;
mod train;

pub use augment::{augment, augment_pair, AugmentConfig};
pub use loss::{momentum_update, moco_loss, ntxent_loss, KeyQueue, NORM_TOL};
pub use train::{
    moco_objective, pretrain, simclr_objective, train, watermark_term, Objective, Perturbation,
};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::models::{EncoderModel, OptimizerKind, ProjectionHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Simclr,
    Moco,
}

impl Algorithm {
    pub fn default_temperature(self) -> f64 {
        match self {
            Self::Simclr => 0.5,
            Self::Moco => 0.2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Simclr => "simclr",
            Self::Moco => "moco",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub algorithm: Algorithm,
    /// Falls back to the algorithm's conventional value when absent.
    pub temperature: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Key-encoder momentum λ (MoCo only).
    pub momentum: f64,
    /// Dictionary size |K| (MoCo only).
    pub queue_size: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Simclr,
            temperature: None,
            batch_size: 50,
            epochs: 100,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.99,
            queue_size: 256,
        }
    }
}

impl ContrastiveConfig {
    pub fn tau(&self) -> f64 {
        self.temperature
            .unwrap_or_else(|| self.algorithm.default_temperature())
    }

    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        let tau = self.tau();
        if !(tau > 0.0 && tau.is_finite()) {
            out.push(format!("{prefix}.temperature must be positive, got {tau}"));
        }
        if self.batch_size < 2 {
            out.push(format!("{prefix}.batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!(
                "{prefix}.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("{prefix}.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.queue_size == 0 {
            out.push(format!("{prefix}.queue_size must be at least 1"));
        }
        out
    }
}

/// Encoder plus projection head, the unit trained by the contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveModel {
    pub encoder: EncoderModel,
    pub head: ProjectionHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over batches of the full objective.
    pub mean_loss: f64,
    pub mean_contrastive: f64,
    /// Zero when no watermark term is active.
    pub mean_watermark: f64,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,mean_loss,wall_time_ms";
    pub const COMBINED_CSV_HEADER: &'static str =
        "epoch,mean_loss,mean_contrastive,mean_watermark,wall_time_ms";

    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.mean_loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.mean_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let _ = writeln!(s, "{},{:e},{}", r.epoch, r.mean_loss, r.wall_time_ms);
        }
        s
    }

    /// Adds the split of the objective into its contrastive and watermark parts.
    pub fn to_combined_csv(&self) -> String {
        let mut s = format!("{}\n", Self::COMBINED_CSV_HEADER);
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{}",
                r.epoch, r.mean_loss, r.mean_contrastive, r.mean_watermark, r.wall_time_ms
            );
        }
        s
    }
}
