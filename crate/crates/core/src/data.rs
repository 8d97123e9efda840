//! Seeded synthetic image datasets and the `AWDS` file format.
//!
//! Each class gets a smooth low-frequency prototype image; samples are the
//! prototype plus Gaussian pixel noise, clamped to `[0, 1]`. Samples are
//! assigned to roles in fixed 60/20/10/10 proportions per class
//! (pretrain / verify / downstream-train / downstream-test). Extra held-out
//! "key" classes only ever appear in the key pool.
//!
//! # `AWDS` layout (all integers little-endian)
//!
//! | field | type |
//! |---|---|
//! | magic `"AWDS"` | 4 bytes |
//! | version (= 1) | u32 |
//! | sample count N | u32 |
//! | height, width, channels | 3 × u32 |
//! | regular class count | u32 |
//! | key class count | u32 |
//! | pixels, sample-major, HWC order | N·H·W·C × f64 |
//! | labels | N × u32 |
//! | role tags (0 pretrain, 1 verify, 2 downstream-train, 3 downstream-test, 4 key pool) | N × u8 |

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{checked_product, Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::numcore::Tensor;
use crate::rng::{self, tag};

pub const MAGIC: &[u8; 4] = b"AWDS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    /// Flattened length.
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, h: usize, w: usize, c: usize) -> usize {
        (h * self.width + w) * self.channels + c
    }
}

impl Default for ImageShape {
    fn default() -> Self {
        Self::new(16, 16, 3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Amplitude of the prototype pattern around mid-grey.
    pub prototype_scale: f64,
    pub noise_std: f64,
    /// Held-out classes whose samples only populate the key pool.
    pub key_classes: usize,
    pub key_samples_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            samples_per_class: 400,
            height: 16,
            width: 16,
            channels: 3,
            prototype_scale: 0.12,
            noise_std: 0.08,
            key_classes: 2,
            key_samples_per_class: 10,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.height, self.width, self.channels)
    }

    /// Lists every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("data.num_classes", self.num_classes),
            ("data.samples_per_class", self.samples_per_class),
            ("data.height", self.height),
            ("data.width", self.width),
            ("data.channels", self.channels),
            ("data.key_classes", self.key_classes),
            ("data.key_samples_per_class", self.key_samples_per_class),
        ] {
            if v == 0 {
                out.push(format!("{name} must be at least 1"));
            }
        }
        if !(self.prototype_scale >= 0.0 && self.prototype_scale.is_finite()) {
            out.push("data.prototype_scale must be a finite value >= 0".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            out.push("data.noise_std must be a finite value >= 0".into());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Pretrain,
    Verify,
    DownstreamTrain,
    DownstreamTest,
    KeyPool,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Pretrain,
        Role::Verify,
        Role::DownstreamTrain,
        Role::DownstreamTest,
        Role::KeyPool,
    ];

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }
}

/// Images and labels of one role.
#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Subset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples (or all of them if fewer).
    pub fn take(&self, n: usize) -> Subset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Subset {
            images: self.images.select_rows(&idx),
            labels: self.labels[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: ImageShape,
    pub num_classes: usize,
    pub key_classes: usize,
    /// `[N, H·W·C]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub roles: Vec<Role>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    pub fn indices(&self, role: Role) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] == role).collect()
    }

    pub fn subset(&self, role: Role) -> Subset {
        let idx = self.indices(role);
        Subset {
            images: self.images.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u32(self.len() as u32);
        w.u32(self.shape.height as u32);
        w.u32(self.shape.width as u32);
        w.u32(self.shape.channels as u32);
        w.u32(self.num_classes as u32);
        w.u32(self.key_classes as u32);
        w.f64s(self.images.data());
        for &l in &self.labels {
            w.u32(l as u32);
        }
        for r in &self.roles {
            w.u8(r.tag());
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::open(buf, MAGIC, VERSION)?;
        let n = r.u32()? as usize;
        let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let num_classes = r.u32()? as usize;
        let key_classes = r.u32()? as usize;
        let shape = ImageShape::new(h, w, c);
        let total = checked_product(&[n, h, w, c])?;
        let pixels = r.f64s(total)?;
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(FormatError::Invalid(format!(
                "pixel {i} = {} outside [0, 1]",
                pixels[i]
            )));
        }
        let classes = num_classes
            .checked_add(key_classes)
            .ok_or_else(|| FormatError::Invalid("class count overflows".into()))?;
        let mut labels = Vec::with_capacity(n.min(buf.len()));
        for i in 0..n {
            let l = r.u32()? as usize;
            if l >= classes {
                return Err(FormatError::Invalid(format!(
                    "label {l} of sample {i} exceeds {classes} classes"
                )));
            }
            labels.push(l);
        }
        let tags = r.raw(n)?;
        let mut roles = Vec::with_capacity(n);
        for (i, &t) in tags.iter().enumerate() {
            roles.push(Role::from_tag(t).ok_or_else(|| {
                FormatError::Invalid(format!("unknown role tag {t} on sample {i}"))
            })?);
        }
        r.finish()?;
        let images = Tensor::new(vec![n, shape.len()], pixels)
            .map_err(|e| FormatError::Invalid(e.to_string()))?;
        Ok(Self {
            shape,
            num_classes,
            key_classes,
            images,
            labels,
            roles,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|source| Error::Format {
            kind: "dataset",
            source,
        })
    }
}

/// Smooth pattern per channel: a constant offset plus a few random
/// low-frequency cosines.
fn prototype(shape: ImageShape, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    const COMPONENTS: usize = 4;
    let norm = ((COMPONENTS + 1) as f64).sqrt();
    let mut img = vec![0.5; shape.len()];
    for c in 0..shape.channels {
        let offset: f64 = rng.random_range(-1.0..1.0);
        let comps: Vec<(f64, f64, f64, f64)> = (0..COMPONENTS)
            .map(|_| {
                let (mut u, mut v) = (0, 0);
                while u == 0 && v == 0 {
                    u = rng.random_range(0..3);
                    v = rng.random_range(0..3);
                }
                let amp = rng.random_range(-1.0..1.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                (u as f64, v as f64, amp, phase)
            })
            .collect();
        for h in 0..shape.height {
            for w in 0..shape.width {
                let y = h as f64 / shape.height as f64;
                let x = w as f64 / shape.width as f64;
                let s: f64 = comps
                    .iter()
                    .map(|(u, v, a, p)| a * (2.0 * PI * (u * y + v * x) + p).cos())
                    .sum();
                img[shape.index(h, w, c)] += scale * (offset + s) / norm;
            }
        }
    }
    img.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    img
}

/// Per-class role counts for `n` samples: 60/20/10/10.
fn role_counts(n: usize) -> [usize; 4] {
    let pre = n * 6 / 10;
    let ver = n * 2 / 10;
    let dtr = n / 10;
    [pre, ver, dtr, n - pre - ver - dtr]
}

pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let shape = cfg.shape();
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Invalid(e.to_string()))?;
    let total_classes = cfg.num_classes + cfg.key_classes;
    let n = cfg.num_classes * cfg.samples_per_class + cfg.key_classes * cfg.key_samples_per_class;
    let mut pixels = Vec::with_capacity(n * shape.len());
    let mut labels = Vec::with_capacity(n);
    let mut roles = Vec::with_capacity(n);
    for class in 0..total_classes {
        let mut prng = rng::stream(cfg.seed, &[tag::DATA, class as u64, 0]);
        let proto = prototype(shape, cfg.prototype_scale, &mut prng);
        let key = class >= cfg.num_classes;
        let count = if key {
            cfg.key_samples_per_class
        } else {
            cfg.samples_per_class
        };
        let counts = role_counts(count);
        let mut srng = rng::stream(cfg.seed, &[tag::DATA, class as u64, 1]);
        for i in 0..count {
            pixels.extend(
                proto
                    .iter()
                    .map(|p| (p + noise.sample(&mut srng)).clamp(0.0, 1.0)),
            );
            labels.push(class);
            let role = if key {
                Role::KeyPool
            } else if i < counts[0] {
                Role::Pretrain
            } else if i < counts[0] + counts[1] {
                Role::Verify
            } else if i < counts[0] + counts[1] + counts[2] {
                Role::DownstreamTrain
            } else {
                Role::DownstreamTest
            };
            roles.push(role);
        }
    }
    Ok(Dataset {
        shape,
        num_classes: cfg.num_classes,
        key_classes: cfg.key_classes,
        images: Tensor::new(vec![n, shape.len()], pixels)?,
        labels,
        roles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            samples_per_class: 20,
            height: 6,
            width: 5,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_bytes() {
        let a = generate(&small()).unwrap().to_bytes();
        let b = generate(&small()).unwrap().to_bytes();
        assert_eq!(a, b);
        let other = generate(&SyntheticConfig {
            seed: 1,
            ..small()
        })
        .unwrap()
        .to_bytes();
        assert_ne!(a, other);
    }

    #[test]
    fn zero_noise_gives_identical_class_members() {
        let d = generate(&SyntheticConfig {
            noise_std: 0.0,
            ..small()
        })
        .unwrap();
        for c in 0..d.num_classes {
            let members: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == c).collect();
            for &i in &members[1..] {
                assert_eq!(d.image(i), d.image(members[0]));
            }
        }
    }

    #[test]
    fn default_split_sizes() {
        let d = generate(&SyntheticConfig::default()).unwrap();
        let sizes: Vec<usize> = Role::ALL.iter().map(|r| d.indices(*r).len()).collect();
        assert_eq!(&sizes[..4], &[1200, 400, 200, 200]);
        assert_eq!(sizes[4], 20);
        for i in d.indices(Role::Pretrain) {
            assert!(d.labels[i] < d.num_classes);
        }
        for i in d.indices(Role::KeyPool) {
            assert!(d.labels[i] >= d.num_classes);
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let d = generate(&small()).unwrap();
        let bytes = d.to_bytes();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), d);

        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Dataset::from_bytes(cut),
            Err(FormatError::Truncated { .. })
        ));

        let mut bumped = bytes.clone();
        bumped[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert_eq!(
            Dataset::from_bytes(&bumped),
            Err(FormatError::UnsupportedVersion {
                found: 2,
                supported: 1
            })
        );

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            Dataset::from_bytes(&magic),
            Err(FormatError::BadMagic { .. })
        ));

        let mut extra = bytes;
        extra.push(0);
        assert_eq!(Dataset::from_bytes(&extra), Err(FormatError::TrailingBytes(1)));
    }

    #[test]
    fn save_load_file() {
        let d = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.awds");
        d.save(&p).unwrap();
        assert_eq!(Dataset::load(&p).unwrap(), d);
    }

    #[test]
    fn invalid_config_lists_fields() {
        let err = generate(&SyntheticConfig {
            num_classes: 0,
            noise_std: -1.0,
            ..small()
        })
        .unwrap_err();
        let Error::Config(p) = err else { panic!() };
        assert_eq!(p.len(), 2);
    }
}
