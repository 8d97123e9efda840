//! Dense tensors, reverse-mode autodiff, and the statistical primitives the
//! rest of the crate builds on.

mod graph;
mod tensor;

pub use graph::{BinaryKind, ElementwiseKind, Gradients, Graph, UnaryKind, Var, GUARD};
pub use tensor::Tensor;

pub(crate) use graph::row_norm;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected a 2-D tensor, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("{op}: value {value:e} at index {index} is outside the guarded domain")]
    Guard {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op}: non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: row {row} has zero norm")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("{op}: {which} is not a probability vector ({detail})")]
    NotDistribution {
        op: &'static str,
        which: &'static str,
        detail: String,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: binary kind needs a second operand")]
    MissingOperand { op: &'static str },
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("backward needs a one-element loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

/// Softmax of a vector (or of each row of a matrix).
pub fn softmax(v: &Tensor) -> Result<Tensor, NumError> {
    let g = Graph::new();
    let out = g.constant(v.clone()).softmax()?;
    Ok((*out.value()).clone())
}

/// `uᵀv / (‖u‖‖v‖)`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64, NumError> {
    let g = Graph::new();
    let a = g.constant(Tensor::vector(u.to_vec()));
    let b = g.constant(Tensor::vector(v.to_vec()));
    Ok(a.cosine_rows(b)?.item())
}

/// `Σ pᵢ log(pᵢ/qᵢ)` for probability vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, NumError> {
    let g = Graph::new();
    let a = g.constant(Tensor::vector(p.to_vec()));
    let b = g.constant(Tensor::vector(q.to_vec()));
    Ok(a.kl_div(b)?.item())
}

/// Worst disagreement found by [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Entries whose analytic and numeric gradients are both below this are
/// compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the autodiff gradient of a scalar function with central finite
/// differences, perturbing every entry of every parameter by `±step`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheck, NumError>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, NumError>,
{
    if !(step > 0.0) {
        return Err(NumError::BadStep(step));
    }
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&g, &vars)?;
        let mut grads = g.backward(loss)?;
        vars.iter().map(|v| grads.take(*v)).collect()
    };
    let eval = |ps: &[Tensor]| -> Result<f64, NumError> {
        let g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let v = f(&g, &vars)?.item();
        if !v.is_finite() {
            return Err(NumError::NonFinite {
                op: "grad_check",
                index: 0,
            });
        }
        Ok(v)
    };
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        param: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi].data()[i];
            let err = relative_error(a, numeric);
            worst.checked += 1;
            if err > worst.max_rel_error {
                worst = GradCheck {
                    max_rel_error: err,
                    param: pi,
                    index: i,
                    analytic: a,
                    numeric,
                    checked: worst.checked,
                };
            }
        }
    }
    Ok(worst)
}
