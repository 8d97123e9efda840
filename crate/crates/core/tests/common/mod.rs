//! Suites shared by the dedicated test targets and the acceptance run.
#![allow(dead_code)]

pub mod gradcheck;
pub mod invariants;
pub mod oracles;

use awenc_core::numcore::Tensor;
use awenc_core::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    rng::stream(seed, &[0xACCE, salt])
}

pub fn uniform(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Rows rescaled to unit length.
pub fn unit_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let data = t
        .data()
        .chunks(c)
        .flat_map(|row| {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(move |v| v / n)
        })
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}
