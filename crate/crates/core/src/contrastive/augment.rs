use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::rng;

/// Augmentations for small synthetic images. Every output is clamped to
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Maximum integer shift in pixels along each axis (edges replicate).
    pub shift_max: usize,
    pub flip_prob: f64,
    pub noise_std: f64,
    /// Upper bound on the fraction of pixels covered by the random square mask.
    pub mask_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            shift_max: 2,
            flip_prob: 0.5,
            noise_std: 0.05,
            mask_frac: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            shift_max: 0,
            flip_prob: 0.0,
            noise_std: 0.0,
            mask_frac: 0.0,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [("augment.flip_prob", self.flip_prob), ("augment.mask_frac", self.mask_frac)] {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            out.push(format!("augment.noise_std must be >= 0, got {}", self.noise_std));
        }
        out
    }
}

/// One random view of `x`.
pub fn augment(x: &[f64], shape: ImageShape, cfg: &AugmentConfig, r: &mut impl Rng) -> Vec<f64> {
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let s = cfg.shift_max as i64;
    let (dy, dx) = if s > 0 {
        (r.random_range(-s..=s), r.random_range(-s..=s))
    } else {
        (0, 0)
    };
    let flip = cfg.flip_prob > 0.0 && r.random_bool(cfg.flip_prob);
    let mut out = vec![0.0; x.len()];
    for i in 0..h {
        let si = (i as i64 - dy).clamp(0, h as i64 - 1) as usize;
        for j in 0..w {
            let jj = if flip { w - 1 - j } else { j };
            let sj = (jj as i64 - dx).clamp(0, w as i64 - 1) as usize;
            for ch in 0..c {
                out[shape.index(i, j, ch)] = x[shape.index(si, sj, ch)];
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let n = Normal::new(0.0, cfg.noise_std).expect("validated std");
        for v in &mut out {
            *v += n.sample(r);
        }
    }
    if cfg.mask_frac > 0.0 {
        let area = r.random_range(0.0..cfg.mask_frac) * (h * w) as f64;
        let side = (area.sqrt().floor() as usize).min(h).min(w);
        if side > 0 {
            let top = r.random_range(0..=h - side);
            let left = r.random_range(0..=w - side);
            for i in top..top + side {
                for j in left..left + side {
                    for ch in 0..c {
                        out[shape.index(i, j, ch)] = 0.0;
                    }
                }
            }
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Two independent views of `x`, fully determined by `seed`.
pub fn augment_pair(
    x: &[f64],
    shape: ImageShape,
    cfg: &AugmentConfig,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::stream(seed, &[rng::tag::AUGMENT]);
    let a = augment(x, shape, cfg, &mut r);
    let b = augment(x, shape, cfg, &mut r);
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(shape: ImageShape) -> Vec<f64> {
        (0..shape.len()).map(|i| ((i * 37 % 101) as f64) / 100.0).collect()
    }

    #[test]
    fn identity_config_is_identity() {
        let shape = ImageShape::new(6, 5, 3);
        let x = image(shape);
        let (a, b) = augment_pair(&x, shape, &AugmentConfig::identity(), 4);
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn deterministic_and_bounded() {
        let shape = ImageShape::default();
        let x = image(shape);
        let cfg = AugmentConfig {
            noise_std: 0.5,
            ..Default::default()
        };
        assert_eq!(augment_pair(&x, shape, &cfg, 9), augment_pair(&x, shape, &cfg, 9));
        let (a, b) = augment_pair(&x, shape, &cfg, 9);
        assert_ne!(a, b);
        assert!(a.iter().chain(&b).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn noise_only_mean_deviation() {
        let shape = ImageShape::default();
        let x = vec![0.5; shape.len()];
        let cfg = AugmentConfig {
            noise_std: 0.1,
            ..AugmentConfig::identity()
        };
        for seed in 0..100 {
            let (a, _) = augment_pair(&x, shape, &cfg, seed);
            let m = a.iter().zip(&x).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64;
            assert!(m > 0.0 && m < 0.2, "seed {seed}: {m}");
        }
    }

    #[test]
    fn flip_reverses_columns() {
        let shape = ImageShape::new(2, 3, 1);
        let x = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let mut r = rng::stream(0, &[]);
        assert_eq!(augment(&x, shape, &cfg, &mut r), vec![0.3, 0.2, 0.1, 0.6, 0.5, 0.4]);
    }
}
