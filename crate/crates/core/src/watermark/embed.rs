use serde::{Deserialize, Serialize};

use super::Watermark;
use crate::contrastive::{
    train, watermark_term, Algorithm, AugmentConfig, ContrastiveConfig, ContrastiveModel, History,
    Perturbation,
};
use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::models::EncoderModel;
use crate::numcore::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// 50 for SimCLR and 32 for MoCo when absent.
    pub batch_size: Option<usize>,
    pub view_seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            alpha: 40.0,
            epochs: 50,
            learning_rate: 0.003,
            batch_size: None,
            view_seed: 0,
        }
    }
}

impl EmbedConfig {
    pub fn batch_for(&self, algorithm: Algorithm) -> usize {
        self.batch_size.unwrap_or(match algorithm {
            Algorithm::Simclr => 50,
            Algorithm::Moco => 32,
        })
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            out.push(format!("embed.alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!(
                "embed.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size.is_some_and(|b| b < 2) {
            out.push("embed.batch_size must be at least 2".into());
        }
        out
    }
}

/// Mean over `batch` of `KL(softmax(E(x)) ‖ softmax(E(clamp(x + w))))`.
pub fn wat_loss(encoder: &EncoderModel, batch: &Tensor, w: &Watermark) -> Result<f64> {
    if batch.rows() == 0 {
        return Err(Error::Invalid("watermark loss of an empty batch".into()));
    }
    let clean = encoder.forward(batch)?;
    let adv = encoder.forward(&w.apply(batch)?)?;
    let g = Graph::new();
    Ok(watermark_term(g.constant(clean), g.constant(adv))?.item())
}

/// Continues contrastive training with `α·ℒ_wat` added, where the
/// perturbation is applied to one randomly chosen view per sample and epoch.
#[allow(clippy::too_many_arguments)]
pub fn embed_watermark(
    model: ContrastiveModel,
    images: &Tensor,
    shape: ImageShape,
    w: &Watermark,
    cfg: &EmbedConfig,
    contrastive: &ContrastiveConfig,
    aug: &AugmentConfig,
    seed: u64,
) -> Result<(ContrastiveModel, History)> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if w.shape != shape || w.w_adv.len() != model.encoder.arch.input_dim() {
        return Err(Error::Invalid(format!(
            "watermark shape {:?} does not fit the encoder input {}",
            w.shape,
            model.encoder.arch.input_dim()
        )));
    }
    let ccfg = ContrastiveConfig {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_for(contrastive.algorithm),
        ..contrastive.clone()
    };
    let p = Perturbation {
        delta: &w.w_adv,
        alpha: cfg.alpha,
        seed: cfg.view_seed,
    };
    train(model, images, shape, &ccfg, aug, seed, Some(&p), "embed")
}
