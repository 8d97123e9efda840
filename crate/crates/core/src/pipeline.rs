//! The three phases end to end, on in-memory artifacts: pretraining,
//! watermark generation and embedding, then calibration and verification.

use serde::{Deserialize, Serialize};

use crate::attacks::AttackContext;
use crate::config::ExperimentConfig;
use crate::contrastive::{pretrain, ContrastiveModel, History};
use crate::data::{generate, Dataset, Role, Subset};
use crate::error::Result;
use crate::models::{train_linear_probe, DownstreamModel, EncoderModel};
use crate::numcore::Tensor;
use crate::rng;
use crate::verification::{calibrate_threshold, chunks, t_cls, t_sim};
use crate::watermark::{embed_watermark, generate_watermark, sample_rows, select_key, Watermark};

pub fn dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    generate(&cfg.data)
}

/// Phase I: contrastive pretraining on the pretraining split.
pub fn run_pretrain(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(ContrastiveModel, History)> {
    pretrain_with(cfg, ds, &cfg.model.encoder_arch(ds.shape.len()), cfg.seed)
}

fn pretrain_with(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    arch: &crate::models::ArchConfig,
    seed: u64,
) -> Result<(ContrastiveModel, History)> {
    let images = ds.subset(Role::Pretrain).images;
    pretrain(
        &images,
        ds.shape,
        arch,
        &cfg.model.head_arch(),
        &cfg.contrastive,
        &cfg.augment,
        seed,
    )
}

/// A differently shaped encoder trained from another seed, standing in for a
/// third party's model.
pub fn run_surrogate(cfg: &ExperimentConfig, ds: &Dataset) -> Result<EncoderModel> {
    let mut arch = cfg.model.encoder_arch(ds.shape.len());
    let embed = arch.dims.pop().expect("encoder has an output width");
    let widest = arch.dims[1..].iter().copied().max().unwrap_or(embed);
    arch.dims.insert(1, widest * 2);
    arch.dims.push(embed);
    let seed = rng::derive(cfg.seed, &[rng::tag::SURROGATE]);
    Ok(pretrain_with(cfg, ds, &arch, seed)?.0.encoder)
}

/// Generates a perturbation against `encoder` for the given key class and ε.
pub fn forge(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    encoder: &EncoderModel,
    key_class: usize,
    epsilon: f64,
) -> Result<(Watermark, Vec<f64>)> {
    let wc = &cfg.watermark;
    let key = select_key(ds, key_class, wc.key_seed)?;
    let subset = sample_rows(ds, Role::Pretrain, wc.pgd.subset_size, wc.pgd.subset_seed);
    generate_watermark(encoder, &subset, ds.shape, &key, epsilon, &wc.pgd)
}

pub struct Marked {
    pub watermark: Watermark,
    /// PGD loss before each step and after the last.
    pub trajectory: Vec<f64>,
    pub model: ContrastiveModel,
    pub history: History,
}

/// Phases II and III: generate the watermark against the pretrained encoder
/// and embed it by continued training.
pub fn run_watermark(cfg: &ExperimentConfig, ds: &Dataset, model: &ContrastiveModel) -> Result<Marked> {
    let (watermark, trajectory) = forge(
        cfg,
        ds,
        &model.encoder,
        cfg.watermark.key_class,
        cfg.watermark.epsilon_unit(),
    )?;
    let images = ds.subset(Role::Pretrain).images;
    let (marked, history) = embed_watermark(
        model.clone(),
        &images,
        ds.shape,
        &watermark,
        &cfg.embed,
        &cfg.contrastive,
        &cfg.augment,
        rng::derive(cfg.seed, &[rng::tag::EMBED]),
    )?;
    Ok(Marked {
        watermark,
        trajectory,
        model: marked,
        history,
    })
}

/// D″: the first `verify_samples` images of the verify split.
pub fn verify_images(cfg: &ExperimentConfig, ds: &Dataset) -> Tensor {
    ds.subset(Role::Verify).take(cfg.verify.verify_samples).images
}

/// D*: the first `downstream_samples` of the downstream test split.
pub fn downstream_test(cfg: &ExperimentConfig, ds: &Dataset) -> Subset {
    ds.subset(Role::DownstreamTest).take(cfg.verify.downstream_samples)
}

/// Frozen `encoder` plus a linear probe trained on the downstream split.
pub fn downstream_model(cfg: &ExperimentConfig, ds: &Dataset, encoder: &EncoderModel) -> Result<DownstreamModel> {
    let probe = train_linear_probe(
        encoder,
        &ds.subset(Role::DownstreamTrain),
        ds.num_classes,
        &cfg.probe,
    )?;
    Ok(DownstreamModel {
        encoder: encoder.clone(),
        probe,
    })
}

pub fn attack_context<'a>(
    cfg: &'a ExperimentConfig,
    ds: &Dataset,
    pretrain_images: &'a Tensor,
    downstream_train: &'a Subset,
    head_arch: &'a crate::models::ArchConfig,
) -> AttackContext<'a> {
    AttackContext {
        pretrain_images,
        shape: ds.shape,
        head_arch,
        contrastive: &cfg.contrastive,
        augment: &cfg.augment,
        downstream_train,
        num_classes: ds.num_classes,
        seed: rng::derive(cfg.seed, &[rng::tag::ATTACK]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t_s: f64,
    pub t_c: f64,
    /// Per-chunk scores the thresholds were derived from.
    pub clean_sim: Vec<f64>,
    pub marked_sim: Vec<f64>,
    pub clean_cls: Vec<f64>,
    pub marked_cls: Vec<f64>,
}

impl Thresholds {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("thresholds serialise")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| crate::Error::Invalid(format!("thresholds: {e}")))
    }
}

/// Smallest positive `T_sim` a calibration population may contribute.
pub const SIM_FLOOR: f64 = 1e-12;

/// Derives `t_s` and `t_c` from per-chunk scores of the clean and marked
/// encoders with the correct watermark. `T_cls` is a rate over the chunk,
/// so marked scores are floored at one flip per chunk. Thresholds set in the
/// config take precedence.
pub fn calibrate(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    clean: &DownstreamModel,
    marked: &DownstreamModel,
    w: &Watermark,
) -> Result<Thresholds> {
    let parts = cfg.verify.calibration_chunks;
    let ver = chunks(&verify_images(cfg, ds), parts);
    let test = chunks(&downstream_test(cfg, ds).images, parts);
    let sims = |e: &EncoderModel| -> Result<Vec<f64>> { ver.iter().map(|c| t_sim(e, c, w)).collect() };
    let clss = |m: &DownstreamModel| -> Result<Vec<f64>> {
        let mut o = m.clone();
        test.iter().map(|c| t_cls(&mut o, c, w)).collect()
    };
    let clean_sim = sims(&clean.encoder)?;
    let marked_sim = sims(&marked.encoder)?;
    let clean_cls = clss(clean)?;
    let marked_cls = clss(marked)?;
    let t_s = match cfg.verify.t_s {
        Some(t) => t,
        None => calibrate_threshold(
            &clean_sim,
            &marked_sim.iter().map(|s| s.max(SIM_FLOOR)).collect::<Vec<_>>(),
        )?,
    };
    let t_c = match cfg.verify.t_c {
        Some(t) => t,
        None => {
            let floors: Vec<f64> = test
                .iter()
                .zip(&marked_cls)
                .map(|(c, s)| s.max(1.0 / c.rows() as f64))
                .collect();
            calibrate_threshold(&clean_cls, &floors)?
        }
    };
    Ok(Thresholds {
        t_s,
        t_c,
        clean_sim,
        marked_sim,
        clean_cls,
        marked_cls,
    })
}

/// The forged watermarks of the uniqueness comparison: another key image,
/// another ε, and the correct key against a surrogate encoder.
pub fn forgeries(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    clean: &EncoderModel,
    surrogate: &EncoderModel,
) -> Result<Vec<(String, Watermark)>> {
    let wc = &cfg.watermark;
    let eps = wc.epsilon_unit();
    let other_key = (wc.key_class + 1) % ds.key_classes;
    let mut out = Vec::new();
    if other_key != wc.key_class {
        out.push(("wrong-key".to_string(), forge(cfg, ds, clean, other_key, eps)?.0));
    }
    let wrong_eps = (eps * 4.0 / 3.0).min(1.0);
    out.push(("wrong-epsilon".to_string(), forge(cfg, ds, clean, wc.key_class, wrong_eps)?.0));
    out.push(("surrogate".to_string(), forge(cfg, ds, surrogate, wc.key_class, eps)?.0));
    Ok(out)
}
