//! Watermark-removal attacks: fine-tuning all layers on the pretraining data
//! (FTAL), retraining all layers on labelled downstream data (RTAL) and
//! magnitude pruning. None of them sees the watermark.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::contrastive::{train, AugmentConfig, ContrastiveConfig, ContrastiveModel};
use crate::data::{ImageShape, Subset};
use crate::error::{Error, Result};
use crate::models::{
    prune_params, train_linear_probe, ArchConfig, DownstreamModel, EncoderModel, LinearProbe,
    Optimizer, OptimizerKind, ProbeConfig, ProjectionHead,
};
use crate::numcore::{Graph, Tensor};
use crate::rng;
use crate::verification::{t_cls, t_sim};
use crate::watermark::Watermark;

fn default_epochs() -> usize {
    10
}
fn default_lr() -> f64 {
    0.003
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AttackConfig {
    /// Contrastive fine-tuning on the pretraining split with a fresh head.
    Ftal {
        #[serde(default = "default_epochs")]
        epochs: usize,
        #[serde(default = "default_lr")]
        learning_rate: f64,
    },
    /// Supervised retraining of encoder and a fresh probe on the downstream
    /// training split.
    Rtal {
        #[serde(default = "default_epochs")]
        epochs: usize,
        #[serde(default = "default_lr")]
        learning_rate: f64,
        #[serde(default = "default_batch")]
        batch_size: usize,
    },
    Prune { ratio: f64 },
}

impl AttackConfig {
    pub fn ftal() -> Self {
        Self::Ftal {
            epochs: default_epochs(),
            learning_rate: default_lr(),
        }
    }

    pub fn rtal() -> Self {
        Self::Rtal {
            epochs: default_epochs(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
        }
    }

    /// FTAL, RTAL and pruning at 0.2, 0.4, 0.6 and 0.8.
    pub fn standard_sweep() -> Vec<Self> {
        let mut v = vec![Self::ftal(), Self::rtal()];
        v.extend([0.2, 0.4, 0.6, 0.8].map(|ratio| Self::Prune { ratio }));
        v
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ftal { .. } => "ftal",
            Self::Rtal { .. } => "rtal",
            Self::Prune { .. } => "prune",
        }
    }

    /// The attack's main knob: epochs for the training attacks, ratio for pruning.
    pub fn param(&self) -> String {
        match self {
            Self::Ftal { epochs, .. } | Self::Rtal { epochs, .. } => epochs.to_string(),
            Self::Prune { ratio } => ratio.to_string(),
        }
    }

    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            Self::Ftal { learning_rate, .. } | Self::Rtal { learning_rate, .. }
                if !(*learning_rate > 0.0 && learning_rate.is_finite()) =>
            {
                out.push(format!("{prefix}.learning_rate must be positive, got {learning_rate}"));
            }
            Self::Prune { ratio } if !(0.0..=1.0).contains(ratio) => {
                out.push(format!("{prefix}.ratio must lie in [0, 1], got {ratio}"));
            }
            _ => {}
        }
        if let Self::Rtal { batch_size, .. } = self {
            if *batch_size == 0 {
                out.push(format!("{prefix}.batch_size must be at least 1"));
            }
        }
        out
    }
}

/// Everything an attacker holding the encoder needs besides the encoder.
pub struct AttackContext<'a> {
    pub pretrain_images: &'a Tensor,
    pub shape: ImageShape,
    /// Architecture of the fresh projection head used by FTAL.
    pub head_arch: &'a ArchConfig,
    pub contrastive: &'a ContrastiveConfig,
    pub augment: &'a AugmentConfig,
    pub downstream_train: &'a Subset,
    pub num_classes: usize,
    pub seed: u64,
}

/// Continues contrastive training of every encoder layer on `images`, with a
/// freshly initialised projection head.
#[allow(clippy::too_many_arguments)]
pub fn ftal(
    encoder: &EncoderModel,
    images: &Tensor,
    shape: ImageShape,
    head_arch: &ArchConfig,
    contrastive: &ContrastiveConfig,
    aug: &AugmentConfig,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<EncoderModel> {
    let model = ContrastiveModel {
        encoder: encoder.clone(),
        head: ProjectionHead::init(head_arch, seed)?,
    };
    let cfg = ContrastiveConfig {
        epochs,
        learning_rate,
        ..contrastive.clone()
    };
    let (out, _) = train(model, images, shape, &cfg, aug, seed, None, "ftal")?;
    Ok(out.encoder)
}

/// Trains a fresh linear probe and every encoder layer jointly by
/// cross-entropy on `split`, in shuffled mini-batches with plain SGD.
pub fn rtal(
    encoder: &EncoderModel,
    split: &Subset,
    num_classes: usize,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(EncoderModel, LinearProbe)> {
    if split.is_empty() {
        return Err(Error::Invalid("RTAL needs a non-empty downstream split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Invalid("RTAL batch size must be at least 1".into()));
    }
    if let Some(bad) = split.labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Invalid(format!("label {bad} outside [0, {num_classes})")));
    }
    let mut encoder = encoder.clone();
    let mut probe = LinearProbe::init(encoder.embed_dim(), num_classes, seed)?;
    let mut opt = Optimizer::new(OptimizerKind::Sgd, learning_rate);
    let mut order: Vec<usize> = (0..split.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng::stream(seed, &[rng::tag::SHUFFLE, epoch as u64]));
        for idx in order.chunks(batch_size) {
            let labels: Vec<usize> = idx.iter().map(|&i| split.labels[i]).collect();
            let g = Graph::new();
            let (enc, head) = (encoder.bind(&g), probe.bind(&g));
            let stage = |source| Error::Training {
                stage: "rtal",
                epoch,
                source,
            };
            let x = g.constant(split.images.select_rows(idx));
            let loss = enc
                .forward(x)
                .and_then(|h| head.forward(h))
                .and_then(|l| l.cross_entropy(&labels, None))
                .and_then(|l| l.mean())
                .map_err(stage)?;
            if !loss.item().is_finite() {
                return Err(Error::Diverged {
                    stage: "rtal",
                    epoch,
                    loss: loss.item(),
                });
            }
            let mut grads = g.backward(loss).map_err(stage)?;
            let vars: Vec<_> = enc.vars().into_iter().chain(head.vars()).collect();
            let gs: Vec<Tensor> = vars.iter().map(|v| grads.take(*v)).collect();
            let params = encoder
                .params
                .tensors_mut()
                .chain(probe.params.tensors_mut())
                .collect();
            opt.update(params, &gs);
        }
    }
    Ok((encoder, probe))
}

/// Zeroes the smallest-magnitude encoder weights.
pub fn prune_attack(encoder: &EncoderModel, ratio: f64) -> Result<EncoderModel> {
    let mut out = encoder.clone();
    out.params = prune_params(&encoder.params, ratio)?;
    Ok(out)
}

/// Applies one attack. RTAL also yields the attacker's probe.
pub fn run_attack(
    encoder: &EncoderModel,
    attack: &AttackConfig,
    ctx: &AttackContext,
) -> Result<(EncoderModel, Option<LinearProbe>)> {
    let problems = attack.problems("attack");
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    match *attack {
        AttackConfig::Ftal {
            epochs,
            learning_rate,
        } => Ok((
            ftal(
                encoder,
                ctx.pretrain_images,
                ctx.shape,
                ctx.head_arch,
                ctx.contrastive,
                ctx.augment,
                epochs,
                learning_rate,
                ctx.seed,
            )?,
            None,
        )),
        AttackConfig::Rtal {
            epochs,
            learning_rate,
            batch_size,
        } => {
            let (e, p) = rtal(
                encoder,
                ctx.downstream_train,
                ctx.num_classes,
                epochs,
                learning_rate,
                batch_size,
                ctx.seed,
            )?;
            Ok((e, Some(p)))
        }
        AttackConfig::Prune { ratio } => Ok((prune_attack(encoder, ratio)?, None)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub attack: String,
    pub param: String,
    pub acc_ce: f64,
    pub acc_we: f64,
    pub t_cls_ce: f64,
    pub t_cls_we: f64,
    pub t_sim_ce: f64,
    pub t_sim_we: f64,
    /// White-box verdict on the attacked marked encoder.
    pub verified_we: bool,
}

impl AttackRow {
    pub fn t_cls_gap(&self) -> f64 {
        (self.t_cls_ce - self.t_cls_we).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub threshold: f64,
    pub rows: Vec<AttackRow>,
}

impl AttackReport {
    pub const CSV_HEADER: &'static str =
        "attack,param,acc_ce,acc_we,t_cls_ce,t_cls_we,t_cls_gap,t_sim_ce,t_sim_we,verified_we";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
                r.attack,
                r.param,
                r.acc_ce,
                r.acc_we,
                r.t_cls_ce,
                r.t_cls_we,
                r.t_cls_gap(),
                r.t_sim_ce,
                r.t_sim_we,
                r.verified_we
            );
        }
        s
    }
}

/// Scores for one (clean, marked) pair of downstream models.
struct Scored {
    acc: f64,
    t_cls: f64,
    t_sim: f64,
}

fn score(
    m: &DownstreamModel,
    w: &Watermark,
    verify_images: &Tensor,
    test: &Subset,
) -> Result<Scored> {
    let mut oracle = m.clone();
    Ok(Scored {
        acc: m.accuracy(test)?,
        t_cls: t_cls(&mut oracle, &test.images, w)?,
        t_sim: t_sim(&m.encoder, verify_images, w)?,
    })
}

/// Attacks both the clean and the marked encoder and re-verifies each. The
/// first row is the unattacked baseline. Probes for FTAL and pruning are
/// trained afresh on the attacked encoder; RTAL keeps its own.
#[allow(clippy::too_many_arguments)]
pub fn attack_report(
    clean: &EncoderModel,
    marked: &EncoderModel,
    w: &Watermark,
    attacks: &[AttackConfig],
    ctx: &AttackContext,
    probe_cfg: &ProbeConfig,
    verify_images: &Tensor,
    test: &Subset,
    t_s: f64,
) -> Result<AttackReport> {
    let downstream = |e: EncoderModel, probe: Option<LinearProbe>| -> Result<DownstreamModel> {
        let probe = match probe {
            Some(p) => p,
            None => train_linear_probe(&e, ctx.downstream_train, ctx.num_classes, probe_cfg)?,
        };
        Ok(DownstreamModel { encoder: e, probe })
    };
    let row = |name: &str, param: String, ce: Scored, we: Scored| AttackRow {
        attack: name.to_string(),
        param,
        acc_ce: ce.acc,
        acc_we: we.acc,
        t_cls_ce: ce.t_cls,
        t_cls_we: we.t_cls,
        t_sim_ce: ce.t_sim,
        t_sim_we: we.t_sim,
        verified_we: we.t_sim < t_s,
    };
    let mut rows = Vec::with_capacity(attacks.len() + 1);
    let ce = score(&downstream(clean.clone(), None)?, w, verify_images, test)?;
    let we = score(&downstream(marked.clone(), None)?, w, verify_images, test)?;
    rows.push(row("none", String::new(), ce, we));
    for a in attacks {
        let (e, p) = run_attack(clean, a, ctx)?;
        let ce = score(&downstream(e, p)?, w, verify_images, test)?;
        let (e, p) = run_attack(marked, a, ctx)?;
        let we = score(&downstream(e, p)?, w, verify_images, test)?;
        rows.push(row(a.name(), a.param(), ce, we));
    }
    Ok(AttackReport {
        threshold: t_s,
        rows,
    })
}
