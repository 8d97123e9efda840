use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::{
    augment_pair, moco_loss, momentum_update, ntxent_loss, Algorithm, AugmentConfig,
    ContrastiveConfig, ContrastiveModel, EpochRecord, History, KeyQueue,
};
use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::models::{ArchConfig, BoundMlp, EncoderModel, Optimizer, ProjectionHead};
use crate::numcore::{Graph, NumError, Tensor, Var};
use crate::rng;

/// A fixed input perturbation whose effect on the encoder is trained in
/// alongside the contrastive objective.
#[derive(Debug, Clone, Copy)]
pub struct Perturbation<'a> {
    /// Added to one view per sample, result clamped to `[0, 1]`.
    pub delta: &'a [f64],
    /// Weight of the consistency term; zero disables it entirely.
    pub alpha: f64,
    /// Seeds the per-sample, per-epoch choice of perturbed view.
    pub seed: u64,
}

/// Batch objective and its two parts.
pub struct Objective<'g> {
    pub total: Var<'g>,
    pub contrastive: f64,
    pub watermark: f64,
}

/// Mean over rows of `KL(softmax(clean) ‖ softmax(perturbed))`.
pub fn watermark_term<'g>(clean: Var<'g>, perturbed: Var<'g>) -> Result<Var<'g>, NumError> {
    clean.kl_logits(perturbed)?.mean()
}

fn combine<'g>(con: Var<'g>, wat: Option<(Var<'g>, f64)>) -> Result<Objective<'g>> {
    match wat {
        None => Ok(Objective {
            total: con,
            contrastive: con.item(),
            watermark: 0.0,
        }),
        Some((w, alpha)) => Ok(Objective {
            total: con.add(w.scale(alpha)?)?,
            contrastive: con.item(),
            watermark: w.item(),
        }),
    }
}

/// SimCLR objective for one batch of `n` samples.
///
/// `x` holds the `2n` views interleaved (rows `2k`, `2k+1` belong to sample
/// `k`). With `wat = Some((selected, alpha))` it is followed by `n` perturbed
/// rows, and row `2n + k` is compared against view row `selected[k]`.
pub fn simclr_objective<'g>(
    encoder: &BoundMlp<'g>,
    head: &BoundMlp<'g>,
    x: Var<'g>,
    n: usize,
    tau: f64,
    wat: Option<(&[usize], f64)>,
) -> Result<Objective<'g>> {
    let h = encoder.forward(x)?;
    let views = if wat.is_some() {
        h.gather_rows(&(0..2 * n).collect::<Vec<_>>())?
    } else {
        h
    };
    let con = ntxent_loss(head.forward(views)?, tau)?;
    let wat = match wat {
        None => None,
        Some((sel, alpha)) => {
            let clean = h.gather_rows(sel)?;
            let adv = h.gather_rows(&(2 * n..3 * n).collect::<Vec<_>>())?;
            Some((watermark_term(clean, adv)?, alpha))
        }
    };
    combine(con, wat)
}

/// MoCo objective for one batch of `n` queries.
///
/// `xq` holds the `n` query views; with `wat = Some(alpha)` it is followed by
/// `n` clean rows and then their `n` perturbed counterparts. `keys` are the
/// normalised key embeddings of the positive views.
pub fn moco_objective<'g>(
    encoder: &BoundMlp<'g>,
    head: &BoundMlp<'g>,
    xq: Var<'g>,
    keys: &Tensor,
    queue: &Tensor,
    n: usize,
    tau: f64,
    wat: Option<f64>,
) -> Result<Objective<'g>> {
    let g = xq.graph();
    let h = encoder.forward(xq)?;
    let hq = if wat.is_some() {
        h.gather_rows(&(0..n).collect::<Vec<_>>())?
    } else {
        h
    };
    let q = head.forward(hq)?.normalize_rows()?;
    let con = moco_loss(q, g.constant(keys.clone()), queue, tau)?;
    let wat = match wat {
        None => None,
        Some(alpha) => {
            let clean = h.gather_rows(&(n..2 * n).collect::<Vec<_>>())?;
            let adv = h.gather_rows(&(2 * n..3 * n).collect::<Vec<_>>())?;
            Some((watermark_term(clean, adv)?, alpha))
        }
    };
    combine(con, wat)
}

/// Initialises encoder and head from `seed` and trains them.
pub fn pretrain(
    images: &Tensor,
    shape: ImageShape,
    encoder_arch: &ArchConfig,
    head_arch: &ArchConfig,
    cfg: &ContrastiveConfig,
    aug: &AugmentConfig,
    seed: u64,
) -> Result<(ContrastiveModel, History)> {
    if encoder_arch.output_dim() != head_arch.input_dim() {
        return Err(Error::Invalid(format!(
            "head input width {} does not match encoder output width {}",
            head_arch.input_dim(),
            encoder_arch.output_dim()
        )));
    }
    let model = ContrastiveModel {
        encoder: EncoderModel::init(encoder_arch, seed)?,
        head: ProjectionHead::init(head_arch, seed)?,
    };
    train(model, images, shape, cfg, aug, seed, None, "pretrain")
}

fn perturb(x: &[f64], delta: &[f64]) -> Vec<f64> {
    x.iter().zip(delta).map(|(a, d)| (a + d).clamp(0.0, 1.0)).collect()
}

struct SampleViews {
    a: Vec<f64>,
    b: Vec<f64>,
    /// Whether the second view is the perturbed one.
    second: bool,
}

/// Continues contrastive training of `model` on `images` (one flattened image
/// per row). With an active `perturbation` the consistency term is added to
/// every batch. Results depend only on the inputs and `seed`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    mut model: ContrastiveModel,
    images: &Tensor,
    shape: ImageShape,
    cfg: &ContrastiveConfig,
    aug: &AugmentConfig,
    seed: u64,
    perturbation: Option<&Perturbation>,
    stage: &'static str,
) -> Result<(ContrastiveModel, History)> {
    let problems = cfg.problems("contrastive");
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let dim = shape.len();
    if images.shape().len() != 2 || images.cols() != dim {
        return Err(Error::Invalid(format!(
            "{stage}: images have shape {:?}, expected [N, {dim}]",
            images.shape()
        )));
    }
    if model.encoder.arch.input_dim() != dim {
        return Err(Error::Invalid(format!(
            "{stage}: encoder expects {} inputs, images have {dim}",
            model.encoder.arch.input_dim()
        )));
    }
    let n = images.rows();
    if n < 2 && cfg.epochs > 0 {
        return Err(Error::Invalid(format!(
            "{stage}: need at least 2 samples, got {n}"
        )));
    }
    let wat = perturbation.filter(|p| p.alpha != 0.0);
    if let Some(p) = wat {
        if p.delta.len() != dim {
            return Err(Error::Invalid(format!(
                "{stage}: perturbation has {} values, images have {dim}",
                p.delta.len()
            )));
        }
        if !(p.alpha > 0.0 && p.alpha.is_finite()) {
            return Err(Error::Invalid(format!("{stage}: alpha must be >= 0, got {}", p.alpha)));
        }
    }

    let tau = cfg.tau();
    let proj = model.head.arch.output_dim();
    let mut moco = match cfg.algorithm {
        Algorithm::Simclr => None,
        Algorithm::Moco => {
            let mut queue = KeyQueue::new(cfg.queue_size, proj)?;
            queue.push(&prime_keys(&model, images, shape, cfg.queue_size, aug, seed)?)?;
            Some((model.clone(), queue))
        }
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut history = History::default();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let e = epoch as u64;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::tag::SHUFFLE, e]));
        let (mut sum, mut sum_con, mut sum_wat, mut batches) = (0.0, 0.0, 0.0, 0usize);

        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let b = batch.len();
            let views: Vec<SampleViews> = batch
                .par_iter()
                .map(|&i| {
                    let (a, bb) =
                        augment_pair(images.row(i), shape, aug, rng::derive(seed, &[e, i as u64]));
                    let second = wat.is_some_and(|p| {
                        rng::stream(p.seed, &[rng::tag::VIEW_SELECT, e, i as u64]).random_bool(0.5)
                    });
                    SampleViews { a, b: bb, second }
                })
                .collect();
            let adv_rows = |v: &SampleViews, p: &Perturbation| {
                perturb(if v.second { &v.b } else { &v.a }, p.delta)
            };

            let g = Graph::new();
            let enc = model.encoder.bind(&g);
            let head = model.head.bind(&g);
            let wrap = |r: NumError| Error::Training {
                stage,
                epoch,
                source: r,
            };
            let lift = |err: Error| match err {
                Error::Num(source) => wrap(source),
                other => other,
            };

            let mut new_keys = None;
            let obj = match &moco {
                None => {
                    let mut rows: Vec<&[f64]> = Vec::with_capacity(3 * b);
                    for v in &views {
                        rows.push(&v.a);
                        rows.push(&v.b);
                    }
                    let adv: Vec<Vec<f64>> = match wat {
                        Some(p) => views.iter().map(|v| adv_rows(v, p)).collect(),
                        None => Vec::new(),
                    };
                    rows.extend(adv.iter().map(|r| r.as_slice()));
                    let sel: Vec<usize> = views
                        .iter()
                        .enumerate()
                        .map(|(k, v)| 2 * k + v.second as usize)
                        .collect();
                    let x = g.constant(Tensor::from_rows(&rows, dim).map_err(wrap)?);
                    simclr_objective(&enc, &head, x, b, tau, wat.map(|p| (sel.as_slice(), p.alpha)))
                        .map_err(lift)?
                }
                Some((key_model, queue)) => {
                    let xk = Tensor::from_rows(&views.iter().map(|v| &v.b).collect::<Vec<_>>(), dim)
                        .map_err(wrap)?;
                    let k = key_model.head.forward(&key_model.encoder.forward(&xk)?)?;
                    let k = normalized(&k).map_err(wrap)?;
                    let mut rows: Vec<&[f64]> = views.iter().map(|v| v.a.as_slice()).collect();
                    let clean_adv: Vec<(Vec<f64>, Vec<f64>)> = match wat {
                        Some(p) => views
                            .iter()
                            .map(|v| {
                                let clean = if v.second { &v.b } else { &v.a };
                                (clean.clone(), adv_rows(v, p))
                            })
                            .collect(),
                        None => Vec::new(),
                    };
                    rows.extend(clean_adv.iter().map(|(c, _)| c.as_slice()));
                    rows.extend(clean_adv.iter().map(|(_, a)| a.as_slice()));
                    let xq = g.constant(Tensor::from_rows(&rows, dim).map_err(wrap)?);
                    let obj = moco_objective(
                        &enc,
                        &head,
                        xq,
                        &k,
                        &queue.to_tensor(),
                        b,
                        tau,
                        wat.map(|p| p.alpha),
                    )
                    .map_err(lift)?;
                    new_keys = Some(k);
                    obj
                }
            };

            let loss = obj.total.item();
            if !loss.is_finite() {
                return Err(Error::Diverged { stage, epoch, loss });
            }
            let mut grads = g.backward(obj.total).map_err(wrap)?;
            let vars: Vec<Var> = enc.vars().into_iter().chain(head.vars()).collect();
            let gs: Vec<Tensor> = vars.iter().map(|v| grads.take(*v)).collect();
            if gs.iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged { stage, epoch, loss });
            }
            let params: Vec<&mut Tensor> = model
                .encoder
                .params
                .tensors_mut()
                .chain(model.head.params.tensors_mut())
                .collect();
            opt.update(params, &gs);

            if let Some((key_model, queue)) = &mut moco {
                key_model.encoder.params =
                    momentum_update(&key_model.encoder.params, &model.encoder.params, cfg.momentum)?;
                key_model.head.params =
                    momentum_update(&key_model.head.params, &model.head.params, cfg.momentum)?;
                queue.push(&new_keys.expect("moco batch produced keys"))?;
            }

            sum += loss;
            sum_con += obj.contrastive;
            sum_wat += obj.watermark;
            batches += 1;
        }

        let denom = batches.max(1) as f64;
        history.records.push(EpochRecord {
            epoch,
            mean_loss: sum / denom,
            mean_contrastive: sum_con / denom,
            mean_watermark: sum_wat / denom,
            wall_time_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok((model, history))
}

/// Keys of up to `count` augmented training images under the initial key
/// encoder, so the first epoch already sees a full queue of negatives.
fn prime_keys(
    model: &ContrastiveModel,
    images: &Tensor,
    shape: ImageShape,
    count: usize,
    aug: &AugmentConfig,
    seed: u64,
) -> Result<Tensor> {
    let mut order: Vec<usize> = (0..images.rows()).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag::QUEUE]));
    order.truncate(count);
    let rows: Vec<Vec<f64>> = order
        .par_iter()
        .map(|&i| augment_pair(images.row(i), shape, aug, rng::derive(seed, &[rng::tag::QUEUE, i as u64])).1)
        .collect();
    let x = Tensor::from_rows(&rows, shape.len())?;
    let k = model.head.forward(&model.encoder.forward(&x)?)?;
    Ok(normalized(&k)?)
}

fn normalized(t: &Tensor) -> Result<Tensor, NumError> {
    let g = Graph::new();
    Ok((*g.constant(t.clone()).normalize_rows()?.value()).clone())
}
