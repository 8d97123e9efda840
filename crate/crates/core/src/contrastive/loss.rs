use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::models::ParamStore;
use crate::numcore::{row_norm, NumError, Tensor, Var};

/// Largest tolerated deviation of an input norm from 1.
pub const NORM_TOL: f64 = 1e-6;

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// NT-Xent over a `[2N, p]` batch where rows `2k` and `2k+1` are the two views
/// of sample `k`. Every row is an anchor; the mean over all `2N` anchors is
/// returned.
pub fn ntxent_loss<'g>(z: Var<'g>, tau: f64) -> Result<Var<'g>> {
    check_tau(tau)?;
    let shape = z.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[0] % 2 != 0 {
        return Err(Error::Invalid(format!(
            "ntxent expects [2N, p] with N >= 1, got {shape:?}"
        )));
    }
    let rows = shape[0];
    let zn = z.normalize_rows()?;
    let sim = zn.matmul(zn.transpose()?)?.scale(1.0 / tau)?;
    let targets: Vec<usize> = (0..rows).map(|i| i ^ 1).collect();
    let selves: Vec<usize> = (0..rows).collect();
    Ok(sim.cross_entropy(&targets, Some(&selves))?.mean()?)
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    let c = t.cols();
    if c == 0 {
        return Ok(());
    }
    for (r, row) in t.data().chunks(c).enumerate() {
        let n = row_norm(row);
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Invalid(format!(
                "moco: {what} row {r} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

/// MoCo InfoNCE for a batch of queries `[B, p]` against their positive keys
/// `[B, p]` and a shared set of negative keys `[K, p]`. The softmax runs over
/// the positive key together with all negatives. Inputs must be ℓ2-normalised.
pub fn moco_loss<'g>(q: Var<'g>, k_plus: Var<'g>, negatives: &Tensor, tau: f64) -> Result<Var<'g>> {
    check_tau(tau)?;
    let (qv, kv) = (q.value(), k_plus.value());
    if qv.shape().len() != 2 || qv.shape() != kv.shape() {
        return Err(NumError::ShapeMismatch {
            op: "moco_loss",
            left: qv.shape().to_vec(),
            right: kv.shape().to_vec(),
        }
        .into());
    }
    check_unit_rows(&qv, "query")?;
    check_unit_rows(&kv, "positive key")?;
    check_unit_rows(negatives, "queue")?;
    let b = qv.shape()[0];
    let pos = q.mul(k_plus)?.sum_last()?.reshape(&[b, 1])?;
    let logits = if negatives.numel() == 0 {
        pos
    } else {
        if negatives.shape().len() != 2 || negatives.cols() != qv.cols() {
            return Err(NumError::ShapeMismatch {
                op: "moco_loss",
                left: qv.shape().to_vec(),
                right: negatives.shape().to_vec(),
            }
            .into());
        }
        let g = q.graph();
        let neg = q.matmul(g.constant(negatives.clone()).transpose()?)?;
        pos.concat_cols(neg)?
    };
    let targets = vec![0; b];
    Ok(logits.scale(1.0 / tau)?.cross_entropy(&targets, None)?.mean()?)
}

/// `θ_k ← λ·θ_k + (1−λ)·θ_q`, elementwise.
pub fn momentum_update(key: &ParamStore, query: &ParamStore, lambda: f64) -> Result<ParamStore> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("momentum {lambda} outside [0, 1)")));
    }
    key.check_compatible(query)?;
    let mut out = key.clone();
    for (k, q) in out.tensors_mut().zip(query.tensors()) {
        for (a, b) in k.data_mut().iter_mut().zip(q.data()) {
            *a = lambda * *a + (1.0 - lambda) * b;
        }
    }
    Ok(out)
}

/// FIFO dictionary of normalised key embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl KeyQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Invalid("queue size must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends every row of `keys`, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, keys: &Tensor) -> Result<()> {
        if keys.numel() > 0 && keys.cols() != self.dim {
            return Err(Error::Invalid(format!(
                "queue holds {}-dim keys, got {:?}",
                self.dim,
                keys.shape()
            )));
        }
        check_unit_rows(keys, "enqueued key")?;
        for r in 0..keys.numel() / self.dim.max(1) {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(keys.row(r).to_vec());
        }
        Ok(())
    }

    /// `[len, dim]`, oldest first.
    pub fn to_tensor(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.entries.iter().map(|v| v.as_slice()).collect();
        Tensor::from_rows(&rows, self.dim).expect("rows share the queue width")
    }
}
