use serde::{Deserialize, Serialize};

use super::{PgdMeta, Watermark};
use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::models::{BoundMlp, EncoderModel};
use crate::numcore::{Graph, NumError, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdConfig {
    pub steps: usize,
    /// Signed-gradient step η; ε/10 when absent.
    pub step_size: Option<f64>,
    /// Size of the fixed generation subset.
    pub subset_size: usize,
    pub subset_seed: u64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            step_size: None,
            subset_size: 256,
            subset_seed: 0,
        }
    }
}

impl PgdConfig {
    pub fn step_for(&self, epsilon: f64) -> f64 {
        self.step_size.unwrap_or(epsilon / 10.0)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                out.push(format!("watermark.pgd.step_size must be positive, got {s}"));
            }
        }
        if self.subset_size == 0 {
            out.push("watermark.pgd.subset_size must be at least 1".into());
        }
        out
    }
}

/// `mean(1 − cos(E(clamp(x + w)), E(x_tar)))` as a graph node.
///
/// `x` is `[B, D]`, `w` is `[D]` and `target` is the key embedding `[1, d]`.
pub fn adv_objective<'g>(
    encoder: &BoundMlp<'g>,
    x: Var<'g>,
    w: Var<'g>,
    target: Var<'g>,
) -> Result<Var<'g>, NumError> {
    let g = x.graph();
    let adv = x.add(w)?.clamp(0.0, 1.0)?;
    let sim = encoder.forward(adv)?.cosine_rows(target)?;
    g.constant(Tensor::scalar(1.0)).sub(sim.mean()?)
}

fn key_embedding(encoder: &EncoderModel, x_tar: &[f64]) -> Result<Tensor> {
    encoder.forward(&Tensor::matrix(1, x_tar.len(), x_tar.to_vec())?)
}

fn check_inputs(encoder: &EncoderModel, batch: &Tensor, w: &[f64], x_tar: &[f64]) -> Result<()> {
    let d = encoder.arch.input_dim();
    if batch.shape().len() != 2 || batch.cols() != d || w.len() != d || x_tar.len() != d {
        return Err(Error::Invalid(format!(
            "encoder takes {d} inputs; batch {:?}, w {}, x_tar {}",
            batch.shape(),
            w.len(),
            x_tar.len()
        )));
    }
    Ok(())
}

/// Mean over `batch` of `1 − cos(E(clamp(x + w)), E(x_tar))`.
pub fn adv_loss(encoder: &EncoderModel, batch: &Tensor, w: &[f64], x_tar: &[f64]) -> Result<f64> {
    check_inputs(encoder, batch, w, x_tar)?;
    let target = key_embedding(encoder, x_tar)?;
    let g = Graph::new();
    let enc = encoder.bind_frozen(&g);
    let loss = adv_objective(
        &enc,
        g.constant(batch.clone()),
        g.constant(Tensor::vector(w.to_vec())),
        g.constant(target),
    )?;
    Ok(loss.item())
}

/// Projected signed-gradient descent on the perturbation, starting from zero.
///
/// Returns the watermark and the loss before every step followed by the loss
/// after the last one (`steps + 1` values). The encoder is only read.
pub fn generate_watermark(
    encoder: &EncoderModel,
    images: &Tensor,
    shape: ImageShape,
    x_tar: &[f64],
    epsilon: f64,
    cfg: &PgdConfig,
) -> Result<(Watermark, Vec<f64>)> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Invalid(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if images.rows() == 0 {
        return Err(Error::Invalid("empty generation subset".into()));
    }
    let d = shape.len();
    let mut w = vec![0.0; d];
    check_inputs(encoder, images, &w, x_tar)?;
    if let Some(i) = x_tar.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Invalid(format!("x_tar[{i}] outside [0, 1]")));
    }
    let eta = cfg.step_for(epsilon);
    let target = key_embedding(encoder, x_tar)?;
    let stage = |step: usize| move |source: NumError| Error::Training {
        stage: "watermark generation",
        epoch: step,
        source,
    };

    // Loss, gradient with respect to w, and mean similarity at w.
    let eval = |w: &[f64], step: usize| -> Result<(f64, Tensor)> {
        let g = Graph::new();
        let enc = encoder.bind_frozen(&g);
        let wv = g.param(Tensor::vector(w.to_vec()));
        let loss = adv_objective(&enc, g.constant(images.clone()), wv, g.constant(target.clone()))
            .map_err(stage(step))?;
        let mut grads = g.backward(loss).map_err(stage(step))?;
        Ok((loss.item(), grads.take(wv)))
    };

    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let (loss, grad) = eval(&w, step)?;
        if let Some(index) = grad.data().iter().position(|v| !v.is_finite()) {
            return Err(stage(step)(NumError::NonFinite {
                op: "pgd gradient",
                index,
            }));
        }
        trajectory.push(loss);
        for (wi, gi) in w.iter_mut().zip(grad.data()) {
            let s = if *gi > 0.0 {
                1.0
            } else if *gi < 0.0 {
                -1.0
            } else {
                0.0
            };
            *wi = (*wi - eta * s).clamp(-epsilon, epsilon);
        }
        assert!(
            w.iter().all(|v| v.abs() <= epsilon),
            "projection left w outside the ε-ball"
        );
    }
    let final_loss = adv_loss(encoder, images, &w, x_tar)?;
    trajectory.push(final_loss);

    let wm = Watermark {
        shape,
        epsilon,
        w_adv: w,
        x_tar: x_tar.to_vec(),
        generator: encoder.fingerprint(),
        pgd: PgdMeta {
            steps: cfg.steps,
            step_size: eta,
            initial_loss: trajectory[0],
            final_loss,
            final_mean_similarity: 1.0 - final_loss,
        },
    };
    Ok((wm, trajectory))
}
