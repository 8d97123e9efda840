//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass in creation order,
//! which is already a topological order. [`Graph::backward`] walks it once in
//! reverse and is rejected if called a second time.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use super::NumError;

/// Denominators and log arguments smaller than this are rejected.
pub const GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Exp,
    Log,
    Relu,
    Clamp(f64, f64),
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Relu,
    Clamp(f64, f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, usize, usize),
    Unary(UnaryKind, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Reshape(usize),
    Gather(usize, Vec<usize>),
    ConcatCols(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    NormalizeRows(usize),
    CosineRows(usize, usize),
    KlLogits(usize, usize),
    KlProb(usize, usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        exclude: Option<Vec<usize>>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Nodes that the loss does not
    /// depend on get a zero tensor.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        match self.grads[v.id].take() {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn checked(
        &self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var<'_>, NumError> {
        if let Some(index) = value.first_non_finite() {
            return Err(NumError::NonFinite { op: op_name, index });
        }
        Ok(self.push(value, op, requires_grad))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, NumError> {
        if self.backward_done.replace(true) {
            return Err(NumError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(NumError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if let Some(index) = g.first_non_finite() {
                return Err(NumError::NonFinite {
                    op: "backward",
                    index,
                });
            }
            let out = &node.value;
            let val = |i: usize| nodes[i].value.clone();
            let need = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Binary(kind, a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (ga, gb) = binary_backward(*kind, &av, &bv, &g, need(*a), need(*b));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Unary(kind, a) => {
                    let av = val(*a);
                    let gd = g.data();
                    let ad = av.data();
                    let data: Vec<f64> = match kind {
                        UnaryKind::Exp => gd.iter().zip(out.data()).map(|(g, y)| g * y).collect(),
                        UnaryKind::Log => gd.iter().zip(ad).map(|(g, x)| g / x).collect(),
                        UnaryKind::Relu => gd
                            .iter()
                            .zip(ad)
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                        UnaryKind::Clamp(lo, hi) => gd
                            .iter()
                            .zip(ad)
                            .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                            .collect(),
                        UnaryKind::Scale(c) => gd.iter().map(|g| g * c).collect(),
                    };
                    accumulate(&mut grads, *a, Some(Tensor::from_parts(av.shape().to_vec(), data)));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let nn = bv.shape()[1];
                    if need(*a) {
                        let (d, _, _) = gemm(g.data(), (m, nn), false, bv.data(), (k, nn), true);
                        accumulate(&mut grads, *a, Some(Tensor::from_parts(vec![m, k], d)));
                    }
                    if need(*b) {
                        let (d, _, _) = gemm(av.data(), (m, k), true, g.data(), (m, nn), false);
                        accumulate(&mut grads, *b, Some(Tensor::from_parts(vec![k, nn], d)));
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, Some(transpose(&g)));
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, Some(Tensor::full(&shapes[*a], s)));
                }
                Op::Mean(a) => {
                    let cnt = nodes[*a].value.numel().max(1) as f64;
                    let s = g.data()[0] / cnt;
                    accumulate(&mut grads, *a, Some(Tensor::full(&shapes[*a], s)));
                }
                Op::SumLast(a) => {
                    let c = nodes[*a].value.cols();
                    let data: Vec<f64> = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect();
                    accumulate(&mut grads, *a, Some(Tensor::from_parts(shapes[*a].clone(), data)));
                }
                Op::Reshape(a) => {
                    let t = Tensor::from_parts(shapes[*a].clone(), g.into_data());
                    accumulate(&mut grads, *a, Some(t));
                }
                Op::Gather(a, idx) => {
                    let mut t = Tensor::zeros(&shapes[*a]);
                    let c = g.cols();
                    let td = t.data_mut();
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            td[src * c + j] += g.data()[r * c + j];
                        }
                    }
                    accumulate(&mut grads, *a, Some(t));
                }
                Op::ConcatCols(a, b) => {
                    let ca = nodes[*a].value.cols();
                    let cb = nodes[*b].value.cols();
                    let rows = g.rows();
                    let mut da = Vec::with_capacity(rows * ca);
                    let mut db = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        let row = g.row(r);
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    if need(*a) {
                        accumulate(&mut grads, *a, Some(Tensor::from_parts(shapes[*a].clone(), da)));
                    }
                    if need(*b) {
                        accumulate(&mut grads, *b, Some(Tensor::from_parts(shapes[*b].clone(), db)));
                    }
                }
                Op::Softmax(a) => {
                    let mut data = vec![0.0; g.numel()];
                    let c = out.cols();
                    for r in 0..out.numel() / c.max(1) {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            data[r * c + j] = y[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Some(Tensor::from_parts(shapes[*a].clone(), data)));
                }
                Op::LogSoftmax(a) => {
                    let mut data = vec![0.0; g.numel()];
                    let c = out.cols();
                    for r in 0..out.numel() / c.max(1) {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            data[r * c + j] = gr[j] - y[j].exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, Some(Tensor::from_parts(shapes[*a].clone(), data)));
                }
                Op::NormalizeRows(a) => {
                    let av = val(*a);
                    let c = av.cols();
                    let mut data = vec![0.0; g.numel()];
                    for r in 0..av.numel() / c.max(1) {
                        let norm = row_norm(av.row(r));
                        let y = out.row(r);
                        let gr = g.row(r);
                        let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            data[r * c + j] = (gr[j] - y[j] * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, Some(Tensor::from_parts(shapes[*a].clone(), data)));
                }
                Op::CosineRows(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (ga, gb) = cosine_backward(&av, &bv, out, &g);
                    if need(*a) {
                        accumulate(&mut grads, *a, Some(ga));
                    }
                    if need(*b) {
                        accumulate(&mut grads, *b, Some(gb));
                    }
                }
                Op::KlLogits(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let c = av.cols();
                    let mut da = vec![0.0; av.numel()];
                    let mut db = vec![0.0; bv.numel()];
                    for r in 0..av.numel() / c.max(1) {
                        let lp = log_softmax_row(av.row(r));
                        let lq = log_softmax_row(bv.row(r));
                        let kl = out.data()[r];
                        let gr = g.data()[r];
                        for j in 0..c {
                            let p = lp[j].exp();
                            da[r * c + j] = gr * p * ((lp[j] - lq[j]) - kl);
                            db[r * c + j] = gr * (lq[j].exp() - p);
                        }
                    }
                    if need(*a) {
                        accumulate(&mut grads, *a, Some(Tensor::from_parts(shapes[*a].clone(), da)));
                    }
                    if need(*b) {
                        accumulate(&mut grads, *b, Some(Tensor::from_parts(shapes[*b].clone(), db)));
                    }
                }
                Op::KlProb(a, b) => {
                    let (pv, qv) = (val(*a), val(*b));
                    let c = pv.cols();
                    let mut dp = vec![0.0; pv.numel()];
                    let mut dq = vec![0.0; qv.numel()];
                    for r in 0..pv.numel() / c.max(1) {
                        let gr = g.data()[r];
                        for j in 0..c {
                            let (p, q) = (pv.data()[r * c + j], qv.data()[r * c + j]);
                            if p > 0.0 {
                                dp[r * c + j] = gr * ((p / q).ln() + 1.0);
                                dq[r * c + j] = -gr * p / q;
                            }
                        }
                    }
                    if need(*a) {
                        accumulate(&mut grads, *a, Some(Tensor::from_parts(shapes[*a].clone(), dp)));
                    }
                    if need(*b) {
                        accumulate(&mut grads, *b, Some(Tensor::from_parts(shapes[*b].clone(), dq)));
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    exclude,
                } => {
                    let lv = val(*logits);
                    let c = lv.cols();
                    let mut data = vec![0.0; lv.numel()];
                    for (r, &t) in targets.iter().enumerate() {
                        let ex = exclude.as_ref().map(|e| e[r]);
                        let row = lv.row(r);
                        let lse = masked_logsumexp(row, ex);
                        let gr = g.data()[r];
                        for j in 0..c {
                            if Some(j) == ex {
                                continue;
                            }
                            let p = (row[j] - lse).exp();
                            data[r * c + j] = gr * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(&mut grads, *logits, Some(Tensor::from_parts(shapes[*logits].clone(), data)));
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Option<Tensor>) {
    let Some(g) = g else { return };
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result shape of a broadcast between `a` and `b`, and which side is the
/// smaller (repeated) operand. Supported: equal shapes, a one-element operand,
/// or an operand whose shape is a trailing suffix of the other's.
fn broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if nb == 1 {
        return Some(a.to_vec());
    }
    if na == 1 {
        return Some(b.to_vec());
    }
    let strip = |s: &[usize]| -> Vec<usize> {
        let first = s.iter().position(|&d| d != 1).unwrap_or(s.len());
        s[first..].to_vec()
    };
    let (sa, sb) = (strip(a), strip(b));
    if sb.len() <= a.len() && a.ends_with(&sb) {
        return Some(a.to_vec());
    }
    if sa.len() <= b.len() && b.ends_with(&sa) {
        return Some(b.to_vec());
    }
    None
}

fn binary_backward(
    kind: BinaryKind,
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (na, nb) = (a.numel(), b.numel());
    let mut ga = need_a.then(|| vec![0.0; na]);
    let mut gb = need_b.then(|| vec![0.0; nb]);
    let (ad, bd) = (a.data(), b.data());
    for (i, &gi) in g.data().iter().enumerate() {
        let (ia, ib) = (i % na, i % nb);
        let (x, y) = (ad[ia], bd[ib]);
        let (da, db) = match kind {
            BinaryKind::Add => (gi, gi),
            BinaryKind::Sub => (gi, -gi),
            BinaryKind::Mul => (gi * y, gi * x),
            BinaryKind::Div => (gi / y, -gi * x / (y * y)),
        };
        if let Some(ga) = ga.as_mut() {
            ga[ia] += da;
        }
        if let Some(gb) = gb.as_mut() {
            gb[ib] += db;
        }
    }
    (
        ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
        gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
    )
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

pub(crate) fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn masked_logsumexp(row: &[f64], exclude: Option<usize>) -> f64 {
    let keep = |j: &usize| Some(*j) != exclude;
    let m = (0..row.len()).filter(keep).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
    m + (0..row.len()).filter(keep).map(|j| (row[j] - m).exp()).sum::<f64>().ln()
}

/// Row `r` of `b`, where a one-row `b` is shared by every row of `a`.
fn paired_row(b: &Tensor, r: usize) -> &[f64] {
    if b.numel() == b.cols() {
        b.row(0)
    } else {
        b.row(r)
    }
}

fn cosine_backward(a: &Tensor, b: &Tensor, out: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let c = a.cols();
    let rows = a.numel() / c.max(1);
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    let shared = b.numel() == c;
    for r in 0..rows {
        let ar = a.row(r);
        let br = paired_row(b, r);
        let (na, nb) = (row_norm(ar), row_norm(br));
        let cos = out.data()[r];
        let gr = g.data()[r];
        let boff = if shared { 0 } else { r * c };
        for j in 0..c {
            let (ua, ub) = (ar[j] / na, br[j] / nb);
            ga[r * c + j] += gr * (ub - cos * ua) / na;
            gb[boff + j] += gr * (ua - cos * ub) / nb;
        }
    }
    (
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    )
}

fn rows_of(t: &Tensor) -> usize {
    let c = t.cols();
    if c == 0 {
        t.rows()
    } else {
        t.numel() / c
    }
}

/// Shape of a per-row reduction: `[rows]`.
fn row_shape(t: &Tensor) -> Vec<usize> {
    vec![rows_of(t)]
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars belong to different graphs"
        );
    }

    fn binary(self, kind: BinaryKind, other: Var<'g>) -> Result<Var<'g>, NumError> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let op_name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let shape = broadcast(a.shape(), b.shape()).ok_or_else(|| NumError::ShapeMismatch {
            op: op_name,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })?;
        let n: usize = shape.iter().product();
        let (na, nb) = (a.numel(), b.numel());
        let (ad, bd) = (a.data(), b.data());
        if kind == BinaryKind::Div {
            if let Some(index) = bd.iter().position(|v| v.abs() < GUARD) {
                return Err(NumError::Guard {
                    op: "div",
                    index,
                    value: bd[index],
                });
            }
        }
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (ad[i % na], bd[i % nb]);
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let req = self.requires_grad() || other.requires_grad();
        self.graph.checked(
            op_name,
            Tensor::from_parts(shape, data),
            Op::Binary(kind, self.id, other.id),
            req,
        )
    }

    fn unary(self, kind: UnaryKind) -> Result<Var<'g>, NumError> {
        let a = self.value();
        let op_name = match kind {
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Relu => "relu",
            UnaryKind::Clamp(..) => "clamp",
            UnaryKind::Scale(_) => "scale",
        };
        if let UnaryKind::Log = kind {
            if let Some(index) = a.data().iter().position(|v| *v <= 0.0) {
                return Err(NumError::Guard {
                    op: "log",
                    index,
                    value: a.data()[index],
                });
            }
        }
        let t = a.map(|x| match kind {
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Clamp(lo, hi) => x.clamp(lo, hi),
            UnaryKind::Scale(c) => x * c,
        });
        self.graph
            .checked(op_name, t, Op::Unary(kind, self.id), self.requires_grad())
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>, NumError> {
        self.binary(BinaryKind::Add, other)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>, NumError> {
        self.binary(BinaryKind::Sub, other)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>, NumError> {
        self.binary(BinaryKind::Mul, other)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>, NumError> {
        self.binary(BinaryKind::Div, other)
    }

    pub fn exp(self) -> Result<Var<'g>, NumError> {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(self) -> Result<Var<'g>, NumError> {
        self.unary(UnaryKind::Log)
    }

    pub fn relu(self) -> Result<Var<'g>, NumError> {
        self.unary(UnaryKind::Relu)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'g>, NumError> {
        self.unary(UnaryKind::Clamp(lo, hi))
    }

    pub fn scale(self, c: f64) -> Result<Var<'g>, NumError> {
        self.unary(UnaryKind::Scale(c))
    }

    /// Applies any of the elementwise kinds; binary kinds need `other`.
    pub fn elementwise(
        self,
        kind: ElementwiseKind,
        other: Option<Var<'g>>,
    ) -> Result<Var<'g>, NumError> {
        let need = |o: Option<Var<'g>>| {
            o.ok_or(NumError::MissingOperand {
                op: "elementwise",
            })
        };
        match kind {
            ElementwiseKind::Add => self.add(need(other)?),
            ElementwiseKind::Sub => self.sub(need(other)?),
            ElementwiseKind::Mul => self.mul(need(other)?),
            ElementwiseKind::Div => self.div(need(other)?),
            ElementwiseKind::Exp => self.exp(),
            ElementwiseKind::Log => self.log(),
            ElementwiseKind::Relu => self.relu(),
            ElementwiseKind::Clamp(lo, hi) => self.clamp(lo, hi),
        }
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>, NumError> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let (d, m, n) = gemm(
            a.data(),
            (a.shape()[0], a.shape()[1]),
            false,
            b.data(),
            (b.shape()[0], b.shape()[1]),
            false,
        );
        let req = self.requires_grad() || other.requires_grad();
        self.graph.checked(
            "matmul",
            Tensor::from_parts(vec![m, n], d),
            Op::MatMul(self.id, other.id),
            req,
        )
    }

    pub fn transpose(self) -> Result<Var<'g>, NumError> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(NumError::Rank {
                op: "transpose",
                shape: a.shape().to_vec(),
            });
        }
        let t = transpose(&a);
        Ok(self
            .graph
            .push(t, Op::Transpose(self.id), self.requires_grad()))
    }

    pub fn sum(self) -> Result<Var<'g>, NumError> {
        let s: f64 = self.value().data().iter().sum();
        self.graph
            .checked("sum", Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    /// Mean of all entries; an empty tensor has mean 0.
    pub fn mean(self) -> Result<Var<'g>, NumError> {
        let v = self.value();
        let s = if v.numel() == 0 {
            0.0
        } else {
            v.data().iter().sum::<f64>() / v.numel() as f64
        };
        self.graph
            .checked("mean", Tensor::scalar(s), Op::Mean(self.id), self.requires_grad())
    }

    /// Sums over the last axis.
    pub fn sum_last(self) -> Result<Var<'g>, NumError> {
        let v = self.value();
        let c = v.cols();
        let data: Vec<f64> = if c == 0 {
            vec![0.0; rows_of(&v)]
        } else {
            v.data().chunks(c).map(|r| r.iter().sum()).collect()
        };
        let shape = vec![data.len()];
        self.graph.checked(
            "sum_last",
            Tensor::from_parts(shape, data),
            Op::SumLast(self.id),
            self.requires_grad(),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>, NumError> {
        let v = self.value();
        let t = (*v).clone().reshape(shape.to_vec())?;
        Ok(self
            .graph
            .push(t, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Selects rows of a 2-D tensor (repeats allowed).
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'g>, NumError> {
        let v = self.value();
        if v.shape().len() != 2 {
            return Err(NumError::Rank {
                op: "gather_rows",
                shape: v.shape().to_vec(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.shape()[0]) {
            return Err(NumError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: v.shape()[0],
            });
        }
        let t = v.select_rows(idx);
        Ok(self.graph.push(
            t,
            Op::Gather(self.id, idx.to_vec()),
            self.requires_grad(),
        ))
    }

    pub fn concat_cols(self, other: Var<'g>) -> Result<Var<'g>, NumError> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[0] {
            return Err(NumError::ShapeMismatch {
                op: "concat_cols",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let rows = a.shape()[0];
        let (ca, cb) = (a.shape()[1], b.shape()[1]);
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        let req = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(
            Tensor::from_parts(vec![rows, ca + cb], data),
            Op::ConcatCols(self.id, other.id),
            req,
        ))
    }

    /// Softmax along the last axis, computed with max-subtraction.
    pub fn softmax(self) -> Result<Var<'g>, NumError> {
        let v = self.value();
        let c = v.cols();
        if c == 0 {
            return Err(NumError::Empty { op: "softmax" });
        }
        let data: Vec<f64> = v
            .data()
            .chunks(c)
            .flat_map(|r| log_softmax_row(r).into_iter().map(f64::exp))
            .collect();
        self.graph.checked(
            "softmax",
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::Softmax(self.id),
            self.requires_grad(),
        )
    }

    pub fn log_softmax(self) -> Result<Var<'g>, NumError> {
        let v = self.value();
        let c = v.cols();
        if c == 0 {
            return Err(NumError::Empty { op: "log_softmax" });
        }
        let data: Vec<f64> = v.data().chunks(c).flat_map(log_softmax_row).collect();
        self.graph.checked(
            "log_softmax",
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::LogSoftmax(self.id),
            self.requires_grad(),
        )
    }

    /// Scales every row to unit ℓ2 norm.
    pub fn normalize_rows(self) -> Result<Var<'g>, NumError> {
        let v = self.value();
        let c = v.cols();
        let mut data = Vec::with_capacity(v.numel());
        for (r, row) in v.data().chunks(c.max(1)).enumerate() {
            let n = row_norm(row);
            if n < GUARD {
                return Err(NumError::ZeroNorm {
                    op: "normalize_rows",
                    row: r,
                });
            }
            data.extend(row.iter().map(|x| x / n));
        }
        self.graph.checked(
            "normalize_rows",
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::NormalizeRows(self.id),
            self.requires_grad(),
        )
    }

    /// Row-wise cosine similarity. `other` either has the same shape or is a
    /// single row shared by every row of `self`. Output shape `[rows]`.
    pub fn cosine_rows(self, other: Var<'g>) -> Result<Var<'g>, NumError> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let c = a.cols();
        let shared = b.numel() == c && b.cols() == c;
        if !(a.shape() == b.shape() || shared) {
            return Err(NumError::ShapeMismatch {
                op: "cosine_sim",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let rows = rows_of(&a);
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let (ar, br) = (a.row(r), paired_row(&b, r));
            let (na, nb) = (row_norm(ar), row_norm(br));
            if na < GUARD || nb < GUARD {
                return Err(NumError::ZeroNorm {
                    op: "cosine_sim",
                    row: r,
                });
            }
            let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            data.push(dot / (na * nb));
        }
        let req = self.requires_grad() || other.requires_grad();
        self.graph.checked(
            "cosine_sim",
            Tensor::from_parts(row_shape(&a), data),
            Op::CosineRows(self.id, other.id),
            req,
        )
    }

    /// Row-wise `KL(softmax(self) ‖ softmax(other))` evaluated in log space,
    /// so it stays finite even when the distributions are extremely peaked.
    pub fn kl_logits(self, other: Var<'g>) -> Result<Var<'g>, NumError> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(NumError::ShapeMismatch {
                op: "kl_logits",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let c = a.cols();
        let rows = rows_of(&a);
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let lp = log_softmax_row(a.row(r));
            let lq = log_softmax_row(b.row(r));
            let kl: f64 = (0..c).map(|j| lp[j].exp() * (lp[j] - lq[j])).sum();
            // Rounding can leave a tiny negative value when p ≈ q.
            data.push(kl.max(0.0));
        }
        let req = self.requires_grad() || other.requires_grad();
        self.graph.checked(
            "kl_logits",
            Tensor::from_parts(vec![rows], data),
            Op::KlLogits(self.id, other.id),
            req,
        )
    }

    /// Row-wise `KL(p ‖ q)` for probability vectors, with `0·log(0/q) = 0`.
    pub fn kl_div(self, q: Var<'g>) -> Result<Var<'g>, NumError> {
        self.same_graph(&q);
        let (pv, qv) = (self.value(), q.value());
        if pv.shape() != qv.shape() {
            return Err(NumError::ShapeMismatch {
                op: "kl_divergence",
                left: pv.shape().to_vec(),
                right: qv.shape().to_vec(),
            });
        }
        let c = pv.cols();
        let rows = rows_of(&pv);
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let (p, qq) = (pv.row(r), qv.row(r));
            for (name, dist) in [("p", p), ("q", qq)] {
                if let Some(j) = dist.iter().position(|v| *v < 0.0 || !v.is_finite()) {
                    return Err(NumError::NotDistribution {
                        op: "kl_divergence",
                        which: name,
                        detail: format!("entry {j} = {}", dist[j]),
                    });
                }
                let s: f64 = dist.iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(NumError::NotDistribution {
                        op: "kl_divergence",
                        which: name,
                        detail: format!("sums to {s}"),
                    });
                }
            }
            let mut kl = 0.0;
            for j in 0..c {
                if p[j] > 0.0 {
                    if qq[j] < GUARD {
                        return Err(NumError::Guard {
                            op: "kl_divergence",
                            index: r * c + j,
                            value: qq[j],
                        });
                    }
                    kl += p[j] * (p[j] / qq[j]).ln();
                }
            }
            data.push(kl);
        }
        let req = self.requires_grad() || q.requires_grad();
        self.graph.checked(
            "kl_divergence",
            Tensor::from_parts(vec![rows], data),
            Op::KlProb(self.id, q.id),
            req,
        )
    }

    /// Per-row softmax cross-entropy `−log softmax(logits)[target]`.
    ///
    /// `exclude[r]`, when given, removes column `exclude[r]` from row `r`'s
    /// normaliser entirely (as if its logit were −∞).
    pub fn cross_entropy(
        self,
        targets: &[usize],
        exclude: Option<&[usize]>,
    ) -> Result<Var<'g>, NumError> {
        let v = self.value();
        if v.shape().len() != 2 || v.shape()[0] != targets.len() {
            return Err(NumError::ShapeMismatch {
                op: "cross_entropy",
                left: v.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let c = v.shape()[1];
        if let Some(ex) = exclude {
            if ex.len() != targets.len() {
                return Err(NumError::ShapeMismatch {
                    op: "cross_entropy",
                    left: vec![ex.len()],
                    right: vec![targets.len()],
                });
            }
        }
        let mut data = Vec::with_capacity(targets.len());
        for (r, &t) in targets.iter().enumerate() {
            let ex = exclude.map(|e| e[r]);
            if t >= c || Some(t) == ex {
                return Err(NumError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    len: c,
                });
            }
            let row = v.row(r);
            data.push(masked_logsumexp(row, ex) - row[t]);
        }
        self.graph.checked(
            "cross_entropy",
            Tensor::from_parts(vec![targets.len()], data),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                exclude: exclude.map(|e| e.to_vec()),
            },
            self.requires_grad(),
        )
    }
}
