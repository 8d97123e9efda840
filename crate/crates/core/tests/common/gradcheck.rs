//! Central finite-difference checks of every differentiable operation and of
//! the composite training objectives.

use awenc_core::contrastive::{moco_loss, moco_objective, ntxent_loss, simclr_objective, watermark_term};
use awenc_core::models::BoundMlp;
use awenc_core::numcore::{grad_check, ElementwiseKind, Graph, NumError, Tensor, Var};
use awenc_core::watermark::adv_objective;
use awenc_core::Error;
use rand::Rng;

use super::{stream, uniform, unit_rows};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Seeds per operation; the total case count is this times the op count.
pub const SEEDS_PER_OP: u64 = 4;

type LossFn = Box<dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, NumError>>;

pub struct Case {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
}

fn num(e: Error) -> NumError {
    match e {
        Error::Num(n) => n,
        other => panic!("composite loss failed: {other}"),
    }
}

/// Weighted sum of all entries with fixed random weights, so every output
/// entry receives a distinct upstream gradient.
fn project<'g>(v: Var<'g>, seed: u64) -> Result<Var<'g>, NumError> {
    let shape = v.shape();
    let w = uniform(&mut stream(seed, 99), &shape, -1.0, 1.0);
    v.mul(v.graph().constant(w))?.sum()
}

/// Uniform values kept at least `margin` away from each kink.
fn away(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], margin: f64) -> Tensor {
    let t = uniform(r, shape, lo, hi);
    t.map(|v| {
        let mut v = v;
        for k in kinks {
            if (v - k).abs() < margin {
                v = if v < *k { k - margin } else { k + margin };
            }
        }
        v
    })
}

fn mlp_params(r: &mut impl Rng, dims: &[usize]) -> Vec<Tensor> {
    dims.windows(2)
        .flat_map(|d| {
            [
                uniform(r, &[d[0], d[1]], -0.8, 0.8),
                uniform(r, &[d[1]], -0.2, 0.2),
            ]
        })
        .collect()
}

fn op(name: &'static str, seed: u64) -> (Vec<Tensor>, LossFn) {
    let mut r = stream(seed, name.len() as u64);
    let r = &mut r;
    let s = seed;
    let m = |r: &mut _| uniform(r, &[3, 4], -1.0, 1.0);
    match name {
        "add" => (vec![m(r), m(r)], Box::new(move |_, p| project(p[0].add(p[1])?, s))),
        "add-broadcast" => (
            vec![m(r), uniform(r, &[4], -1.0, 1.0)],
            Box::new(move |_, p| project(p[0].add(p[1])?, s)),
        ),
        "sub" => (vec![m(r), m(r)], Box::new(move |_, p| project(p[0].sub(p[1])?, s))),
        "mul" => (vec![m(r), m(r)], Box::new(move |_, p| project(p[0].mul(p[1])?, s))),
        "div" => (
            vec![m(r), uniform(r, &[3, 4], 0.5, 2.0)],
            Box::new(move |_, p| project(p[0].div(p[1])?, s)),
        ),
        "exp" => (vec![m(r)], Box::new(move |_, p| project(p[0].exp()?, s))),
        "log" => (
            vec![uniform(r, &[3, 4], 0.5, 2.0)],
            Box::new(move |_, p| project(p[0].log()?, s)),
        ),
        "relu" => (
            vec![away(r, &[3, 4], -1.0, 1.0, &[0.0], 0.05)],
            Box::new(move |_, p| project(p[0].relu()?, s)),
        ),
        "clamp" => (
            vec![away(r, &[3, 4], -1.0, 1.0, &[-0.5, 0.5], 0.05)],
            Box::new(move |_, p| project(p[0].clamp(-0.5, 0.5)?, s)),
        ),
        "scale" => (vec![m(r)], Box::new(move |_, p| project(p[0].scale(-2.5)?, s))),
        "elementwise" => (
            vec![m(r), uniform(r, &[3, 4], 0.5, 2.0)],
            Box::new(move |_, p| {
                let q = p[0].elementwise(ElementwiseKind::Mul, Some(p[1]))?;
                project(q.elementwise(ElementwiseKind::Exp, None)?, s)
            }),
        ),
        "matmul" => (
            vec![m(r), uniform(r, &[4, 2], -1.0, 1.0)],
            Box::new(move |_, p| project(p[0].matmul(p[1])?, s)),
        ),
        "transpose" => (vec![m(r)], Box::new(move |_, p| project(p[0].transpose()?, s))),
        "sum" => (vec![m(r)], Box::new(move |_, p| p[0].exp()?.sum())),
        "mean" => (vec![m(r)], Box::new(move |_, p| p[0].exp()?.mean())),
        "sum-last" => (vec![m(r)], Box::new(move |_, p| project(p[0].sum_last()?, s))),
        "reshape" => (
            vec![m(r)],
            Box::new(move |_, p| project(p[0].reshape(&[2, 6])?, s)),
        ),
        "gather-rows" => (
            vec![m(r)],
            Box::new(move |_, p| project(p[0].gather_rows(&[2, 0, 2, 1])?, s)),
        ),
        "concat-cols" => (
            vec![m(r), uniform(r, &[3, 2], -1.0, 1.0)],
            Box::new(move |_, p| project(p[0].concat_cols(p[1])?, s)),
        ),
        "softmax" => (vec![m(r)], Box::new(move |_, p| project(p[0].scale(3.0)?.softmax()?, s))),
        "log-softmax" => (
            vec![m(r)],
            Box::new(move |_, p| project(p[0].scale(3.0)?.log_softmax()?, s)),
        ),
        "normalize-rows" => (
            vec![m(r)],
            Box::new(move |_, p| project(p[0].normalize_rows()?, s)),
        ),
        "cosine-rows" => (
            vec![m(r), m(r)],
            Box::new(move |_, p| project(p[0].cosine_rows(p[1])?, s)),
        ),
        "cosine-broadcast" => (
            vec![m(r), uniform(r, &[1, 4], -1.0, 1.0)],
            Box::new(move |_, p| project(p[0].cosine_rows(p[1])?, s)),
        ),
        "kl-logits" => (
            vec![m(r), m(r)],
            Box::new(move |_, p| project(p[0].scale(2.0)?.kl_logits(p[1].scale(2.0)?)?, s)),
        ),
        "kl-div" => (
            vec![m(r), m(r)],
            Box::new(move |_, p| project(p[0].softmax()?.kl_div(p[1].softmax()?)?, s)),
        ),
        "cross-entropy" => (
            vec![m(r)],
            Box::new(move |_, p| project(p[0].scale(2.0)?.cross_entropy(&[1, 3, 0], None)?, s)),
        ),
        "cross-entropy-exclude" => (
            vec![m(r)],
            Box::new(move |_, p| {
                project(p[0].scale(2.0)?.cross_entropy(&[1, 3, 0], Some(&[0, 2, 1]))?, s)
            }),
        ),
        // Composite objectives.
        "ntxent" => {
            let n = [1, 2, 4][(seed % 3) as usize];
            (
                vec![uniform(r, &[2 * n, 3], -1.0, 1.0)],
                Box::new(move |_, p| ntxent_loss(p[0], 0.5).map_err(num)),
            )
        }
        "moco" => {
            let neg = unit_rows(&uniform(r, &[5, 4], -1.0, 1.0));
            (
                vec![m(r), m(r)],
                Box::new(move |_, p| {
                    moco_loss(p[0].normalize_rows()?, p[1].normalize_rows()?, &neg, 0.2).map_err(num)
                }),
            )
        }
        "watermark-term" => (
            vec![uniform(r, &[3, 5], -2.0, 2.0), uniform(r, &[3, 5], -2.0, 2.0)],
            Box::new(move |_, p| watermark_term(p[0], p[1])),
        ),
        "adv-objective" => {
            let x = uniform(r, &[4, 6], 0.3, 0.7);
            let target = uniform(r, &[1, 3], -1.0, 1.0);
            let mut params = mlp_params(r, &[6, 5, 3]);
            params.push(uniform(r, &[6], -0.05, 0.05));
            (
                params,
                Box::new(move |g, p| {
                    let enc = BoundMlp::from_vars(&p[..4], false);
                    adv_objective(&enc, g.constant(x.clone()), p[4], g.constant(target.clone()))
                }),
            )
        }
        "simclr-objective" => {
            let n = 2;
            let x = uniform(r, &[3 * n, 6], 0.0, 1.0);
            let mut params = mlp_params(r, &[6, 5, 4]);
            params.extend(mlp_params(r, &[4, 4, 3]));
            (
                params,
                Box::new(move |g, p| {
                    let enc = BoundMlp::from_vars(&p[..4], false);
                    let head = BoundMlp::from_vars(&p[4..], false);
                    let o = simclr_objective(&enc, &head, g.constant(x.clone()), n, 0.5, Some((&[1, 2], 3.0)))
                        .map_err(num)?;
                    Ok(o.total)
                }),
            )
        }
        "moco-objective" => {
            let n = 2;
            let x = uniform(r, &[3 * n, 6], 0.0, 1.0);
            let keys = unit_rows(&uniform(r, &[n, 3], -1.0, 1.0));
            let queue = unit_rows(&uniform(r, &[4, 3], -1.0, 1.0));
            let mut params = mlp_params(r, &[6, 5, 4]);
            params.extend(mlp_params(r, &[4, 4, 3]));
            (
                params,
                Box::new(move |g, p| {
                    let enc = BoundMlp::from_vars(&p[..4], false);
                    let head = BoundMlp::from_vars(&p[4..], false);
                    let o = moco_objective(&enc, &head, g.constant(x.clone()), &keys, &queue, n, 0.2, Some(3.0))
                        .map_err(num)?;
                    Ok(o.total)
                }),
            )
        }
        "normalized-encoder" => {
            let x = uniform(r, &[3, 6], 0.0, 1.0);
            (
                mlp_params(r, &[6, 5, 4]),
                Box::new(move |g, p| {
                    let enc = BoundMlp::from_vars(p, false).with_normalized_output(true);
                    project(enc.forward(g.constant(x.clone()))?, s)
                }),
            )
        }
        other => panic!("unknown op {other}"),
    }
}

pub const OPS: &[&str] = &[
    "add",
    "add-broadcast",
    "sub",
    "mul",
    "div",
    "exp",
    "log",
    "relu",
    "clamp",
    "scale",
    "elementwise",
    "matmul",
    "transpose",
    "sum",
    "mean",
    "sum-last",
    "reshape",
    "gather-rows",
    "concat-cols",
    "softmax",
    "log-softmax",
    "normalize-rows",
    "cosine-rows",
    "cosine-broadcast",
    "kl-logits",
    "kl-div",
    "cross-entropy",
    "cross-entropy-exclude",
    "ntxent",
    "moco",
    "watermark-term",
    "adv-objective",
    "simclr-objective",
    "moco-objective",
    "normalized-encoder",
];

pub fn check(name: &'static str, seed: u64) -> Case {
    let (params, f) = op(name, seed);
    let r = grad_check(&*f, &params, STEP).unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
    Case {
        name,
        seed,
        max_rel_error: r.max_rel_error,
        checked: r.checked,
    }
}

pub fn suite() -> Vec<Case> {
    OPS.iter()
        .flat_map(|name| (0..SEEDS_PER_OP).map(move |seed| check(name, seed)))
        .collect()
}
