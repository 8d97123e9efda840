//! Encoder, projection head and linear probe, plus parameter snapshots,
//! checkpoints and magnitude pruning.

pub mod checkpoint;
mod mlp;
mod optim;
mod params;

use std::ops::{Deref, DerefMut};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::ModelKind;
pub use mlp::{ArchConfig, BoundMlp, Mlp};
pub use optim::{Optimizer, OptimizerKind};
pub use params::ParamStore;

use crate::data::Subset;
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor};
use crate::rng;

macro_rules! model_newtype {
    ($(#[$doc:meta])* $name:ident, $kind:expr) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(pub Mlp);

        impl Deref for $name {
            type Target = Mlp;
            fn deref(&self) -> &Mlp {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut Mlp {
                &mut self.0
            }
        }

        impl $name {
            pub const KIND: ModelKind = $kind;

            pub fn to_bytes(&self) -> Vec<u8> {
                checkpoint::encode(Self::KIND, &self.0)
            }

            pub fn from_bytes(buf: &[u8]) -> Result<Self> {
                let (kind, mlp) = checkpoint::decode(buf).map_err(|source| Error::Format {
                    kind: "checkpoint",
                    source,
                })?;
                if kind != Self::KIND {
                    return Err(Error::Invalid(format!(
                        "checkpoint holds a {kind:?}, expected {:?}",
                        Self::KIND
                    )));
                }
                Ok(Self(mlp))
            }

            pub fn save(&self, path: &Path) -> Result<()> {
                std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
            }

            pub fn load(path: &Path) -> Result<Self> {
                let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                Self::from_bytes(&buf)
            }

            /// Hex SHA-256 of the checkpoint bytes.
            pub fn fingerprint(&self) -> String {
                checkpoint::fingerprint(Self::KIND, &self.0)
            }
        }
    };
}

model_newtype!(
    /// Feature extractor trained without labels.
    EncoderModel,
    ModelKind::Encoder
);
model_newtype!(
    /// Maps encoder output into the space where the contrastive loss is applied.
    ProjectionHead,
    ModelKind::Head
);
model_newtype!(
    /// One affine layer from embeddings to class logits.
    LinearProbe,
    ModelKind::Probe
);

impl EncoderModel {
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        Ok(Self(Mlp::init(arch, seed)?))
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.output_dim()
    }
}

impl ProjectionHead {
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        if arch.num_layers() != 2 {
            return Err(Error::Invalid(format!(
                "projection head has two affine layers, got dims {:?}",
                arch.dims
            )));
        }
        Ok(Self(Mlp::init(arch, rng::derive(seed, &[rng::tag::HEAD]))?))
    }
}

impl LinearProbe {
    pub fn init(embed_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let arch = ArchConfig::new(vec![embed_dim, num_classes], false);
        Ok(Self(Mlp::init(&arch, rng::derive(seed, &[rng::tag::PROBE]))?))
    }

    pub fn num_classes(&self) -> usize {
        self.arch.output_dim()
    }
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.cols();
    if c == 0 {
        return Vec::new();
    }
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Encoder followed by a classifier: the downstream model built on a
/// (possibly stolen) encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamModel {
    pub encoder: EncoderModel,
    pub probe: LinearProbe,
}

impl DownstreamModel {
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let feats = self.encoder.forward(images)?;
        Ok(argmax_rows(&self.probe.forward(&feats)?))
    }

    pub fn accuracy(&self, split: &Subset) -> Result<f64> {
        if split.is_empty() {
            return Err(Error::Invalid("accuracy of an empty split".into()));
        }
        let pred = self.predict(&split.images)?;
        let hits = pred.iter().zip(&split.labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / split.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 200,
            seed: 0,
        }
    }
}

/// Trains a linear probe on frozen encoder features by full-batch gradient
/// descent on softmax cross-entropy. The encoder is only read.
pub fn train_linear_probe(
    encoder: &EncoderModel,
    split: &Subset,
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    if split.is_empty() {
        return Err(Error::Invalid("cannot train a probe on an empty split".into()));
    }
    if let Some(bad) = split.labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Invalid(format!(
            "label {bad} outside [0, {num_classes})"
        )));
    }
    let feats = encoder.forward(&split.images)?;
    let mut probe = LinearProbe::init(encoder.embed_dim(), num_classes, cfg.seed)?;
    let mut opt = Optimizer::new(OptimizerKind::Sgd, cfg.learning_rate);
    for epoch in 0..cfg.epochs {
        let g = Graph::new();
        let bound = probe.bind(&g);
        let logits = bound.forward(g.constant(feats.clone()))?;
        let loss = logits
            .cross_entropy(&split.labels, None)
            .and_then(|l| l.mean())
            .map_err(|source| Error::Training {
                stage: "probe",
                epoch,
                source,
            })?;
        let mut grads = g.backward(loss)?;
        let gs: Vec<Tensor> = bound.vars().iter().map(|v| grads.take(*v)).collect();
        opt.update(probe.params.tensors_mut().collect(), &gs);
    }
    Ok(probe)
}

/// Number of weight entries [`prune_params`] zeroes for `ratio` of `n`.
pub fn prune_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    // ratio·n is often an integer up to rounding noise (0.6·5 = 3.0000000000000004).
    let k = if (x - x.round()).abs() < 1e-9 {
        x.round()
    } else {
        x.ceil()
    };
    (k as usize).min(n)
}

/// Zeroes the `⌈ratio·n⌉` smallest-magnitude weight entries across all
/// `*.weight` tensors; biases are never touched. Ties resolve by parameter
/// order, then index.
pub fn prune_params(params: &ParamStore, ratio: f64) -> Result<ParamStore> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("pruning ratio {ratio} outside [0, 1]")));
    }
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, (name, t)) in params.iter().enumerate() {
        if ParamStore::is_weight(name) {
            entries.extend(t.data().iter().enumerate().map(|(i, v)| (v.abs(), pi, i)));
        }
    }
    let k = prune_count(ratio, entries.len());
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = params.clone();
    let mut tensors: Vec<&mut Tensor> = out.tensors_mut().collect();
    for &(_, pi, i) in &entries[..k] {
        tensors[pi].data_mut()[i] = 0.0;
    }
    Ok(out)
}
