//! Adversarial watermark generation against a secret key image, and its
//! embedding into an encoder through an extra consistency loss.
//!
//! Watermark file layout (`AWWM`, version 1, little-endian):
//!
//! | field | type |
//! |---|---|
//! | magic `AWWM`, version | 4 bytes, u32 |
//! | ε (unit pixel scale) | f64 |
//! | height, width, channels | u32 × 3 |
//! | `w_adv` | f64 × H·W·C |
//! | `x_tar` | f64 × H·W·C |
//! | generator fingerprint | u32 length + UTF-8 |
//! | PGD steps | u32 |
//! | step size, initial loss, final loss, final mean similarity | f64 × 4 |

mod embed;
mod pgd;

pub use embed::{embed_watermark, wat_loss, EmbedConfig};
pub use pgd::{adv_loss, adv_objective, generate_watermark, PgdConfig};

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{checked_product, Reader, Writer};
use crate::data::{Dataset, ImageShape, Role};
use crate::error::{Error, FormatError, Result};
use crate::numcore::Tensor;
use crate::rng;

pub const MAGIC: &[u8; 4] = b"AWWM";
pub const VERSION: u32 = 1;

/// Summary of the PGD run that produced a watermark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgdMeta {
    pub steps: usize,
    pub step_size: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_mean_similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Watermark {
    pub shape: ImageShape,
    /// ℓ∞ radius in `[0, 1]` pixel units.
    pub epsilon: f64,
    pub w_adv: Vec<f64>,
    pub x_tar: Vec<f64>,
    /// Fingerprint of the encoder the perturbation was optimised against.
    pub generator: String,
    pub pgd: PgdMeta,
}

impl Watermark {
    pub fn is_zero(&self) -> bool {
        self.w_adv.iter().all(|v| *v == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.w_adv.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// The same key and metadata with an all-zero perturbation.
    pub fn zeroed(&self) -> Self {
        Self {
            w_adv: vec![0.0; self.w_adv.len()],
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.f64(self.epsilon);
        w.u32(self.shape.height as u32);
        w.u32(self.shape.width as u32);
        w.u32(self.shape.channels as u32);
        w.f64s(&self.w_adv);
        w.f64s(&self.x_tar);
        w.bytes(self.generator.as_bytes());
        w.u32(self.pgd.steps as u32);
        w.f64(self.pgd.step_size);
        w.f64(self.pgd.initial_loss);
        w.f64(self.pgd.final_loss);
        w.f64(self.pgd.final_mean_similarity);
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::open(buf, MAGIC, VERSION)?;
        let epsilon = r.f64()?;
        if !(epsilon >= 0.0 && epsilon <= 1.0) {
            return Err(FormatError::Invalid(format!("epsilon {epsilon} outside [0, 1]")));
        }
        let (h, wd, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let n = checked_product(&[h, wd, c])?;
        if n == 0 {
            return Err(FormatError::Invalid("image shape has a zero dimension".into()));
        }
        let w_adv = r.f64s(n)?;
        let x_tar = r.f64s(n)?;
        let generator = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| FormatError::Invalid("generator fingerprint is not UTF-8".into()))?;
        let steps = r.u32()? as usize;
        let step_size = r.f64()?;
        let initial_loss = r.f64()?;
        let final_loss = r.f64()?;
        let final_mean_similarity = r.f64()?;
        r.finish()?;
        if let Some(i) = w_adv.iter().position(|v| !(v.abs() <= epsilon)) {
            return Err(FormatError::Invalid(format!(
                "w_adv[{i}] = {} exceeds epsilon {epsilon}",
                w_adv[i]
            )));
        }
        if let Some(i) = x_tar.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(FormatError::Invalid(format!(
                "x_tar[{i}] = {} outside [0, 1]",
                x_tar[i]
            )));
        }
        for (name, v) in [
            ("step size", step_size),
            ("initial loss", initial_loss),
            ("final loss", final_loss),
            ("final similarity", final_mean_similarity),
        ] {
            if !v.is_finite() {
                return Err(FormatError::Invalid(format!("{name} is not finite")));
            }
        }
        Ok(Self {
            shape: ImageShape::new(h, wd, c),
            epsilon,
            w_adv,
            x_tar,
            generator,
            pgd: PgdMeta {
                steps,
                step_size,
                initial_loss,
                final_loss,
                final_mean_similarity,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|source| Error::Format {
            kind: "watermark",
            source,
        })
    }

    /// Hex SHA-256 of the file bytes.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// `clamp(x + w_adv)` for every row of `images`.
    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        if images.shape().len() != 2 || images.cols() != self.w_adv.len() {
            return Err(Error::Invalid(format!(
                "watermark for {} pixels applied to images of shape {:?}",
                self.w_adv.len(),
                images.shape()
            )));
        }
        let mut out = images.clone();
        for row in out.data_mut().chunks_mut(self.w_adv.len()) {
            for (p, d) in row.iter_mut().zip(&self.w_adv) {
                *p = (*p + d).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }
}

/// Units in which ε is written in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonScale {
    /// 0–255 pixel intensities, as usually quoted.
    #[default]
    Pixel255,
    /// The `[0, 1]` domain images are stored in.
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WatermarkConfig {
    pub epsilon: f64,
    pub epsilon_scale: EpsilonScale,
    /// Index into the held-out key classes.
    pub key_class: usize,
    pub key_seed: u64,
    pub pgd: PgdConfig,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        Self {
            epsilon: 15.0,
            epsilon_scale: EpsilonScale::Pixel255,
            key_class: 0,
            key_seed: 2,
            pgd: PgdConfig::default(),
        }
    }
}

impl WatermarkConfig {
    /// ε in `[0, 1]` units.
    pub fn epsilon_unit(&self) -> f64 {
        match self.epsilon_scale {
            EpsilonScale::Pixel255 => self.epsilon / 255.0,
            EpsilonScale::Unit => self.epsilon,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let e = self.epsilon_unit();
        if !(0.0..=1.0).contains(&e) {
            out.push(format!(
                "watermark.epsilon must map into [0, 1] pixel units, got {e}"
            ));
        }
        out.extend(self.pgd.problems());
        out
    }
}

/// Picks the key image: a random member of held-out key class `key_class`.
pub fn select_key(ds: &Dataset, key_class: usize, seed: u64) -> Result<Vec<f64>> {
    if key_class >= ds.key_classes {
        return Err(Error::Invalid(format!(
            "key class {key_class} requested but the dataset holds {} key classes",
            ds.key_classes
        )));
    }
    let label = ds.num_classes + key_class;
    let pool: Vec<usize> = ds
        .indices(Role::KeyPool)
        .into_iter()
        .filter(|&i| ds.labels[i] == label)
        .collect();
    let &pick = pool
        .choose(&mut rng::stream(seed, &[rng::tag::KEY, key_class as u64]))
        .ok_or_else(|| Error::Invalid(format!("key class {key_class} has no samples")))?;
    Ok(ds.image(pick).to_vec())
}

/// A seeded random subset of `n` images of `role` (all of them if fewer).
pub fn sample_rows(ds: &Dataset, role: Role, n: usize, seed: u64) -> Tensor {
    let mut idx = ds.indices(role);
    idx.shuffle(&mut rng::stream(seed, &[rng::tag::PGD_SUBSET]));
    idx.truncate(n);
    ds.images.select_rows(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Watermark {
        let shape = ImageShape::new(2, 2, 1);
        Watermark {
            shape,
            epsilon: 0.1,
            w_adv: vec![0.1, -0.1, 0.0, 0.05],
            x_tar: vec![0.0, 1.0, 0.5, 0.25],
            generator: "ab12".into(),
            pgd: PgdMeta {
                steps: 3,
                step_size: 0.01,
                initial_loss: 0.9,
                final_loss: 0.2,
                final_mean_similarity: 0.8,
            },
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let w = sample();
        let bytes = w.to_bytes();
        assert_eq!(Watermark::from_bytes(&bytes).unwrap(), w);
        assert_eq!(Watermark::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        for cut in [0, 3, 8, 20, bytes.len() - 1] {
            assert!(Watermark::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            Watermark::from_bytes(&extra),
            Err(FormatError::TrailingBytes(1))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            Watermark::from_bytes(&v2),
            Err(FormatError::UnsupportedVersion { found: 2, .. })
        ));
        let mut bad = w.clone();
        bad.w_adv[0] = 0.2;
        assert!(Watermark::from_bytes(&bad.to_bytes()).is_err());
    }

    #[test]
    fn epsilon_scales() {
        let c = WatermarkConfig::default();
        assert_eq!(c.epsilon_unit(), 15.0 / 255.0);
        let u = WatermarkConfig {
            epsilon: 15.0 / 255.0,
            epsilon_scale: EpsilonScale::Unit,
            ..Default::default()
        };
        assert_eq!(u.epsilon_unit(), c.epsilon_unit());
        let big = WatermarkConfig {
            epsilon: 300.0,
            ..Default::default()
        };
        assert!(!big.problems().is_empty());
    }

    #[test]
    fn apply_clamps() {
        let w = sample();
        let x = Tensor::matrix(1, 4, vec![0.95, 0.05, 0.5, 0.99]).unwrap();
        let y = w.apply(&x).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 0.5, 1.0]);
        assert!(w.apply(&Tensor::zeros(&[1, 3])).is_err());
    }
}
