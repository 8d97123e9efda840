//! Direct transcriptions of the contrastive losses, written with plain loops
//! and no shared code with the library.

use awenc_core::contrastive::{moco_loss, ntxent_loss};
use awenc_core::numcore::{Graph, Tensor};

use super::{stream, uniform, unit_rows};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Mean over all `2N` anchors of
/// `−log(exp(s(i, pos)/τ) / Σ_{k≠i} exp(s(i, k)/τ))`, rows `2k`/`2k+1` paired.
pub fn ntxent_brute(z: &[Vec<f64>], tau: f64) -> f64 {
    let m = z.len();
    let mut total = 0.0;
    for i in 0..m {
        let pos = i ^ 1;
        let mut denom = 0.0;
        for k in 0..m {
            if k != i {
                denom += (cos(&z[i], &z[k]) / tau).exp();
            }
        }
        total += -((cos(&z[i], &z[pos]) / tau).exp() / denom).ln();
    }
    total / m as f64
}

/// Cross-entropy form: for each query the logits are `q·k₊/τ` followed by
/// `q·k_j/τ` for every negative, and the target is index 0.
pub fn moco_brute(q: &[Vec<f64>], k: &[Vec<f64>], neg: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for (qi, ki) in q.iter().zip(k) {
        let mut logits = vec![dot(qi, ki) / tau];
        logits.extend(neg.iter().map(|n| dot(qi, n) / tau));
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[0];
    }
    total / q.len() as f64
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Largest absolute difference between `ntxent_loss` and the brute force
/// over the given batch sizes and seeds.
pub fn ntxent_max_error(ns: &[usize], seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for &n in ns {
        for seed in 0..seeds {
            let mut r = stream(seed, n as u64);
            let z = uniform(&mut r, &[2 * n, 5], -1.0, 1.0);
            let tau = [0.1, 0.5, 1.0][(seed % 3) as usize];
            let g = Graph::new();
            let lib = ntxent_loss(g.constant(z.clone()), tau).unwrap().item();
            worst = worst.max((lib - ntxent_brute(&rows(&z), tau)).abs());
        }
    }
    worst
}

pub fn moco_max_error(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut r = stream(seed, 1000);
        let b = 1 + (seed % 6) as usize;
        let kq = (seed % 9) as usize;
        let q = unit_rows(&uniform(&mut r, &[b, 4], -1.0, 1.0));
        let k = unit_rows(&uniform(&mut r, &[b, 4], -1.0, 1.0));
        let neg = if kq == 0 {
            Tensor::zeros(&[0, 4])
        } else {
            unit_rows(&uniform(&mut r, &[kq, 4], -1.0, 1.0))
        };
        let tau = [0.07, 0.2, 1.0][(seed % 3) as usize];
        let g = Graph::new();
        let lib = moco_loss(g.constant(q.clone()), g.constant(k.clone()), &neg, tau)
            .unwrap()
            .item();
        worst = worst.max((lib - moco_brute(&rows(&q), &rows(&k), &rows(&neg), tau)).abs());
    }
    worst
}
