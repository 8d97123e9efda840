//! Invariants checked for one seed each; the property tests and the
//! acceptance run drive them over many seeds.

use std::collections::HashSet;

use awenc_core::contrastive::momentum_update;
use awenc_core::data::{generate, Role, SyntheticConfig};
use awenc_core::models::{prune_count, prune_params, ParamStore};
use awenc_core::numcore::{kl_divergence, softmax};
use rand::Rng;

use super::{stream, uniform};

pub type Check = fn(u64) -> Result<(), String>;

pub const ALL: [(&str, Check); 5] = [
    ("softmax normalization", softmax_normalized),
    ("KL non-negativity", kl_non_negative),
    ("momentum geometric convergence", momentum_converges),
    ("prune-count exactness", prune_count_exact),
    ("split disjointness", splits_disjoint),
];

pub fn softmax_normalized(seed: u64) -> Result<(), String> {
    let mut r = stream(seed, 1);
    let n = r.random_range(1..40);
    let spread = [1.0, 50.0, 700.0][r.random_range(0..3)];
    let v = uniform(&mut r, &[n], -spread, spread);
    let p = softmax(&v).map_err(|e| e.to_string())?;
    let sum: f64 = p.data().iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(format!("softmax sums to {sum}"));
    }
    if p.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err("softmax entry outside [0, 1]".into());
    }
    Ok(())
}

pub fn kl_non_negative(seed: u64) -> Result<(), String> {
    let mut r = stream(seed, 2);
    let n = r.random_range(1..30);
    // Logit spread 10 keeps every probability above the 1e-12 guard.
    let spread = [0.1, 3.0, 10.0][r.random_range(0..3)];
    let p = softmax(&uniform(&mut r, &[n], -spread, spread)).unwrap();
    let q = softmax(&uniform(&mut r, &[n], -spread, spread)).unwrap();
    let d = kl_divergence(p.data(), q.data()).map_err(|e| e.to_string())?;
    if d < -1e-12 {
        return Err(format!("KL(p‖q) = {d}"));
    }
    let same = kl_divergence(p.data(), p.data()).map_err(|e| e.to_string())?;
    if same.abs() > 1e-12 {
        return Err(format!("KL(p‖p) = {same}"));
    }
    Ok(())
}

fn store(r: &mut impl Rng, layers: usize) -> ParamStore {
    let mut p = ParamStore::new();
    for i in 0..layers {
        let (a, b) = (r.random_range(1..6), r.random_range(1..6));
        p.insert(format!("layer{i}.weight"), uniform(r, &[a, b], -1.0, 1.0)).unwrap();
        p.insert(format!("layer{i}.bias"), uniform(r, &[b], -1.0, 1.0)).unwrap();
    }
    p
}

/// With the query fixed, `k_t − q = λᵗ (k₀ − q)` entrywise.
pub fn momentum_converges(seed: u64) -> Result<(), String> {
    let mut r = stream(seed, 3);
    let query = store(&mut r, 2);
    let mut key = query.clone();
    for t in key.tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-2.0..2.0);
        }
    }
    let lambda = r.random_range(0.5..0.999);
    let k0 = key.clone();
    for step in 1..=25 {
        key = momentum_update(&key, &query, lambda).map_err(|e| e.to_string())?;
        let factor = lambda.powi(step);
        for ((k, q), k0) in key.tensors().zip(query.tensors()).zip(k0.tensors()) {
            for ((kv, qv), k0v) in k.data().iter().zip(q.data()).zip(k0.data()) {
                let want = qv + factor * (k0v - qv);
                if (kv - want).abs() > 1e-12 * (1.0 + want.abs()) {
                    return Err(format!("step {step}: {kv} != {want}"));
                }
            }
        }
    }
    Ok(())
}

pub fn prune_count_exact(seed: u64) -> Result<(), String> {
    let mut r = stream(seed, 4);
    let layers = r.random_range(1..4);
    let params = store(&mut r, layers);
    let ratio = match r.random_range(0..5) {
        0 => 0.0,
        1 => 1.0,
        _ => r.random_range(0.0..1.0),
    };
    let pruned = prune_params(&params, ratio).map_err(|e| e.to_string())?;
    let (mut n, mut zeroed) = (0, 0);
    for ((name, before), after) in params.iter().zip(pruned.tensors()) {
        if ParamStore::is_weight(name) {
            n += before.numel();
            zeroed += after.data().iter().filter(|v| **v == 0.0).count();
        } else if before != after {
            return Err(format!("{name} changed"));
        }
    }
    let want = prune_count(ratio, n);
    if zeroed != want {
        return Err(format!("ratio {ratio}: zeroed {zeroed} of {n}, expected {want}"));
    }
    Ok(())
}

pub fn splits_disjoint(seed: u64) -> Result<(), String> {
    let mut r = stream(seed, 5);
    let cfg = SyntheticConfig {
        num_classes: r.random_range(1..5),
        samples_per_class: r.random_range(1..30),
        height: 2,
        width: 3,
        channels: 1,
        key_classes: r.random_range(1..3),
        key_samples_per_class: r.random_range(1..5),
        seed: r.random(),
        ..SyntheticConfig::default()
    };
    let ds = generate(&cfg).map_err(|e| e.to_string())?;
    let mut seen = HashSet::new();
    for role in Role::ALL {
        for i in ds.indices(role) {
            if !seen.insert(i) {
                return Err(format!("sample {i} is in two splits"));
            }
        }
    }
    if seen.len() != ds.len() {
        return Err(format!("{} of {} samples assigned", seen.len(), ds.len()));
    }
    let key: HashSet<usize> = ds.indices(Role::KeyPool).iter().map(|&i| ds.labels[i]).collect();
    let rest: HashSet<usize> = Role::ALL[..4]
        .iter()
        .flat_map(|&role| ds.indices(role))
        .map(|i| ds.labels[i])
        .collect();
    if !key.is_disjoint(&rest) {
        return Err("key classes leak into the other splits".into());
    }
    Ok(())
}
