//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive applied to its [`Var`] handles. Leaves
//! created with [`Graph::param`] require gradients; [`Graph::backward`] walks
//! the tape once in reverse and returns the gradient of a scalar loss with
//! respect to each of them. A graph is built for one forward pass and thrown
//! away afterwards.
//!
//! Broadcasting in the binary ops is one-sided: the right operand may be
//! broadcast onto the left one (scalar, trailing row, or any size-1 extent),
//! never the other way round.
//!
//! `conv1d` is a cross-correlation: the kernel is not flipped.

mod kernels;

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use kernels::{BnSaved, ConvGeom};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize, Option<Vec<usize>>),
    Sub(usize, usize, Option<Vec<usize>>),
    Mul(usize, usize, Option<Vec<usize>>),
    Div(usize, usize, Option<Vec<usize>>),
    Scale(usize, f64),
    Matmul { a: usize, b: usize, n: usize, k: usize, m: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Reduce { a: usize, outer: usize, len: usize, inner: usize, mean: bool },
    SumAll(usize),
    Softmax { a: usize, cols: usize },
    LogSoftmax { a: usize, cols: usize },
    L2Norm { a: usize, cols: usize },
    NormalizeRows { a: usize, cols: usize },
    CosineRows { a: usize, b: usize, cols: usize },
    Concat { parts: Vec<(usize, usize)>, outer: usize },
    IndexSelect { a: usize, indices: Vec<usize>, row: usize },
    Reshape(usize),
    Conv1d { x: usize, w: usize, bias: usize, geom: ConvGeom },
    MaxPool { x: usize, argmax: Vec<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, saved: BnSaved },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Rows shorter than this are treated as zero vectors by the cosine and
/// normalisation primitives.
pub const NORM_EPS: f64 = 1e-12;

/// A single-threaded tape of primitive applications.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Which statistics a batch-norm layer normalises with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnMode {
    /// Current-batch mean/variance; running statistics are refreshed.
    TrainStats,
    /// Stored running statistics; nothing is updated.
    RunningStats,
}

/// Exponential moving averages kept by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    /// `running <- (1 - m) * running + m * batch`, with the unbiased
    /// variance estimate feeding the variance average.
    pub fn update(&mut self, batch_mean: &[f64], batch_var_biased: &[f64], count: usize) {
        let m = self.momentum;
        let unbias = count as f64 / (count as f64 - 1.0);
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - m) * self.mean[c] + m * batch_mean[c];
            self.var[c] = (1.0 - m) * self.var[c] + m * batch_var_biased[c] * unbias;
        }
    }
}

/// Gradients of a scalar with respect to the leaves that required them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    match v.iter().find(|x| !x.is_finite()) {
        Some(x) => Err(Error::numeric(op, format!("produced {x}"))),
        None => Ok(()),
    }
}

/// Maps every flat index of `a_shape` onto the flat index of `b_shape`
/// broadcast against it. Returns `None` when the shapes are identical.
fn broadcast_map(op: &'static str, a: &[usize], b: &[usize]) -> Result<Option<Vec<usize>>> {
    if a == b {
        return Ok(None);
    }
    if b.len() > a.len() {
        return Err(Error::shape(op, a, b));
    }
    let offset = a.len() - b.len();
    let mut bstrides = vec![0usize; a.len()];
    let mut stride = 1;
    for i in (0..b.len()).rev() {
        let (da, db) = (a[offset + i], b[i]);
        if db == da {
            bstrides[offset + i] = stride;
        } else if db != 1 {
            return Err(Error::shape(op, a, b));
        }
        stride *= db;
    }
    let numel: usize = a.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; a.len()];
    for _ in 0..numel {
        map.push(idx.iter().zip(&bstrides).map(|(i, s)| i * s).sum());
        for d in (0..a.len()).rev() {
            idx[d] += 1;
            if idx[d] < a[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Some(map))
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(Error::shape(op, shape, &[])),
    }
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for v in row {
            let e = (v - max).exp();
            z += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    out
}

fn row_norms(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks(cols)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push_checked(&self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, rg: bool) -> Result<Var<'_>> {
        check_finite(op_name, &data)?;
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    /// A leaf that gradients flow into.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let nodes = self.nodes.borrow();
        let base = nodes[first.id].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total = 0;
        let mut meta = Vec::with_capacity(parts.len());
        let mut rg = false;
        for p in parts {
            let s = nodes[p.id].value.shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
            meta.push((p.id, s[axis] * inner));
            rg |= nodes[p.id].requires_grad;
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(id, chunk) in &meta {
                data.extend_from_slice(&nodes[id].value.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        drop(nodes);
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat { parts: meta, outer }, rg))
    }

    /// Runs reverse accumulation from the scalar `loss` and consumes the
    /// tape: afterwards the graph is empty and its handles are dead.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let n = loss.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut grads);
        }
        for (i, node) in nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            }
        }
        nodes.clear();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn unbroadcast(g: &[f64], map: &Option<Vec<usize>>, b_len: usize) -> Vec<f64> {
    match map {
        None => g.to_vec(),
        Some(map) => {
            let mut out = vec![0.0; b_len];
            for (v, &j) in g.iter().zip(map) {
                out[j] += v;
            }
            out
        }
    }
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| nodes[id].value.data();
    let needs = |id: usize| nodes[id].requires_grad;
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b, map) => {
            if needs(*a) {
                accumulate(grads, nodes, *a, g.to_vec());
            }
            if needs(*b) {
                accumulate(grads, nodes, *b, unbroadcast(g, map, val(*b).len()));
            }
        }
        Op::Sub(a, b, map) => {
            if needs(*a) {
                accumulate(grads, nodes, *a, g.to_vec());
            }
            if needs(*b) {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(grads, nodes, *b, unbroadcast(&neg, map, val(*b).len()));
            }
        }
        Op::Mul(a, b, map) => {
            let (av, bv) = (val(*a), val(*b));
            let bat = |k: usize| map.as_ref().map_or(k, |m| m[k]);
            if needs(*a) {
                let ga = g.iter().enumerate().map(|(k, gv)| gv * bv[bat(k)]).collect();
                accumulate(grads, nodes, *a, ga);
            }
            if needs(*b) {
                let prod: Vec<f64> = g.iter().zip(av).map(|(gv, x)| gv * x).collect();
                accumulate(grads, nodes, *b, unbroadcast(&prod, map, bv.len()));
            }
        }
        Op::Div(a, b, map) => {
            let bv = val(*b);
            let bat = |k: usize| map.as_ref().map_or(k, |m| m[k]);
            if needs(*a) {
                let ga = g.iter().enumerate().map(|(k, gv)| gv / bv[bat(k)]).collect();
                accumulate(grads, nodes, *a, ga);
            }
            if needs(*b) {
                let prod: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(k, gv)| -gv * out[k] / bv[bat(k)])
                    .collect();
                accumulate(grads, nodes, *b, unbroadcast(&prod, map, bv.len()));
            }
        }
        Op::Scale(a, k) => accumulate(grads, nodes, *a, g.iter().map(|v| v * k).collect()),
        Op::Matmul { a, b, n, k, m } => {
            let (av, bv) = (val(*a), val(*b));
            let (n, k, m) = (*n, *k, *m);
            if needs(*a) {
                let mut ga = vec![0.0; n * k];
                for r in 0..n {
                    for c in 0..k {
                        ga[r * k + c] = (0..m).map(|j| g[r * m + j] * bv[c * m + j]).sum();
                    }
                }
                accumulate(grads, nodes, *a, ga);
            }
            if needs(*b) {
                let mut gb = vec![0.0; k * m];
                for r in 0..n {
                    for c in 0..k {
                        let x = av[r * k + c];
                        for j in 0..m {
                            gb[c * m + j] += x * g[r * m + j];
                        }
                    }
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Transpose { a, rows, cols } => {
            let mut ga = vec![0.0; rows * cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    ga[r * cols + c] = g[c * rows + r];
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Relu(a) => {
            let av = val(*a);
            let ga = g.iter().zip(av).map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 }).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Exp(a) => accumulate(grads, nodes, *a, g.iter().zip(out).map(|(gv, y)| gv * y).collect()),
        Op::Log(a) => {
            let av = val(*a);
            accumulate(grads, nodes, *a, g.iter().zip(av).map(|(gv, x)| gv / x).collect());
        }
        Op::Sigmoid(a) => accumulate(
            grads,
            nodes,
            *a,
            g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect(),
        ),
        Op::Reduce { a, outer, len, inner, mean } => {
            let scale = if *mean { 1.0 / *len as f64 } else { 1.0 };
            let mut ga = vec![0.0; outer * len * inner];
            for o in 0..*outer {
                for l in 0..*len {
                    for j in 0..*inner {
                        ga[(o * len + l) * inner + j] = g[o * inner + j] * scale;
                    }
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::SumAll(a) => accumulate(grads, nodes, *a, vec![g[0]; val(*a).len()]),
        Op::Softmax { a, cols } => {
            let mut ga = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(*cols).zip(out.chunks(*cols)) {
                let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                ga.extend(gr.iter().zip(yr).map(|(x, y)| y * (x - dot)));
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::LogSoftmax { a, cols } => {
            let mut ga = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(*cols).zip(out.chunks(*cols)) {
                let s: f64 = gr.iter().sum();
                ga.extend(gr.iter().zip(yr).map(|(x, y)| x - y.exp() * s));
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::L2Norm { a, cols } => {
            let av = val(*a);
            let mut ga = Vec::with_capacity(av.len());
            for ((xr, n), gv) in av.chunks(*cols).zip(out).zip(g) {
                if *n > 0.0 {
                    ga.extend(xr.iter().map(|x| gv * x / n));
                } else {
                    ga.extend(std::iter::repeat_n(0.0, xr.len()));
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::NormalizeRows { a, cols } => {
            let av = val(*a);
            let norms = row_norms(av, *cols);
            let mut ga = Vec::with_capacity(av.len());
            for ((gr, yr), n) in g.chunks(*cols).zip(out.chunks(*cols)).zip(norms) {
                if n > NORM_EPS {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    ga.extend(gr.iter().zip(yr).map(|(x, y)| (x - y * dot) / n));
                } else {
                    ga.extend(std::iter::repeat_n(0.0, gr.len()));
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::CosineRows { a, b, cols } => {
            let (av, bv) = (val(*a), val(*b));
            let na = row_norms(av, *cols);
            let nb = row_norms(bv, *cols);
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            for r in 0..na.len() {
                if na[r] <= NORM_EPS || nb[r] <= NORM_EPS {
                    continue;
                }
                let c = out[r];
                for j in 0..*cols {
                    let k = r * cols + j;
                    ga[k] = g[r] * (bv[k] / (na[r] * nb[r]) - c * av[k] / (na[r] * na[r]));
                    gb[k] = g[r] * (av[k] / (na[r] * nb[r]) - c * bv[k] / (nb[r] * nb[r]));
                }
            }
            if needs(*a) {
                accumulate(grads, nodes, *a, ga);
            }
            if needs(*b) {
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Concat { parts, outer } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(id, chunk) in parts {
                if needs(id) {
                    let mut gp = Vec::with_capacity(outer * chunk);
                    for o in 0..*outer {
                        gp.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                    }
                    accumulate(grads, nodes, id, gp);
                }
                offset += chunk;
            }
        }
        Op::IndexSelect { a, indices, row } => {
            let mut ga = vec![0.0; val(*a).len()];
            for (k, &src) in indices.iter().enumerate() {
                for j in 0..*row {
                    ga[src * row + j] += g[k * row + j];
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::Conv1d { x, w, bias, geom } => {
            let cg = kernels::conv1d_backward(val(*x), val(*w), g, geom, [needs(*x), needs(*w), needs(*bias)]);
            if let Some(v) = cg.x {
                accumulate(grads, nodes, *x, v);
            }
            if let Some(v) = cg.w {
                accumulate(grads, nodes, *w, v);
            }
            if let Some(v) = cg.bias {
                accumulate(grads, nodes, *bias, v);
            }
        }
        Op::MaxPool { x, argmax } => {
            let mut gx = vec![0.0; val(*x).len()];
            for (gv, &src) in g.iter().zip(argmax) {
                gx[src] += gv;
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::BatchNorm { x, gamma, beta, saved } => {
            let [gx, gg, gb] =
                kernels::batch_norm_backward(g, val(*gamma), saved, [needs(*x), needs(*gamma), needs(*beta)]);
            if let Some(v) = gx {
                accumulate(grads, nodes, *x, v);
            }
            if let Some(v) = gg {
                accumulate(grads, nodes, *gamma, v);
            }
            if let Some(v) = gb {
                accumulate(grads, nodes, *beta, v);
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// The value of a one-element variable.
    pub fn item(&self) -> Result<f64> {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "variables from different graphs"
        );
    }

    fn unary(&self, name: &'static str, f: impl Fn(&Tensor) -> Result<(Vec<usize>, Vec<f64>)>, op: Op) -> Result<Var<'g>> {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        let (shape, data) = f(&node.value)?;
        let rg = node.requires_grad;
        drop(nodes);
        self.graph.push_checked(name, shape, data, op, rg)
    }

    fn binary(
        &self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize, Option<Vec<usize>>) -> Op,
    ) -> Result<Var<'g>> {
        self.same_graph(&other);
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        let map = broadcast_map(name, a.value.shape(), b.value.shape())?;
        let (av, bv) = (a.value.data(), b.value.data());
        let data: Vec<f64> = match &map {
            None => av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect(),
            Some(m) => av.iter().zip(m).map(|(x, &j)| f(*x, bv[j])).collect(),
        };
        let shape = a.value.shape().to_vec();
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        self.graph
            .push_checked(name, shape, data, make(self.id, other.id, map), rg)
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn scale(&self, k: f64) -> Result<Var<'g>> {
        self.unary(
            "scale",
            |t| Ok((t.shape().to_vec(), t.data().iter().map(|v| v * k).collect())),
            Op::Scale(self.id, k),
        )
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let (av, bv) = (a.data(), b.data());
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            let orow = &mut data[r * m..(r + 1) * m];
            for c in 0..k {
                let x = av[r * k + c];
                for (o, y) in orow.iter_mut().zip(&bv[c * m..(c + 1) * m]) {
                    *o += x * y;
                }
            }
        }
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        drop(nodes);
        self.graph.push_checked(
            "matmul",
            vec![n, m],
            data,
            Op::Matmul { a: self.id, b: other.id, n, k, m },
            rg,
        )
    }

    /// Transpose of a rank-2 variable.
    pub fn t(&self) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape("transpose", &shape, &[]));
        }
        let (rows, cols) = (shape[0], shape[1]);
        self.unary(
            "transpose",
            |t| {
                let v = t.data();
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        out[c * rows + r] = v[r * cols + c];
                    }
                }
                Ok((vec![cols, rows], out))
            },
            Op::Transpose { a: self.id, rows, cols },
        )
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        self.unary(
            "relu",
            |t| Ok((t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect())),
            Op::Relu(self.id),
        )
    }

    pub fn exp(&self) -> Result<Var<'g>> {
        self.unary(
            "exp",
            |t| Ok((t.shape().to_vec(), t.data().iter().map(|v| v.exp()).collect())),
            Op::Exp(self.id),
        )
    }

    /// Natural logarithm; non-positive inputs are a numeric-domain error.
    pub fn ln(&self) -> Result<Var<'g>> {
        self.unary(
            "log",
            |t| {
                if let Some(v) = t.data().iter().find(|v| **v <= 0.0) {
                    return Err(Error::numeric("log", format!("argument {v} is not positive")));
                }
                Ok((t.shape().to_vec(), t.data().iter().map(|v| v.ln()).collect()))
            },
            Op::Log(self.id),
        )
    }

    pub fn sigmoid(&self) -> Result<Var<'g>> {
        self.unary(
            "sigmoid",
            |t| {
                let out = t
                    .data()
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 {
                            1.0 / (1.0 + (-v).exp())
                        } else {
                            let e = v.exp();
                            e / (1.0 + e)
                        }
                    })
                    .collect();
                Ok((t.shape().to_vec(), out))
            },
            Op::Sigmoid(self.id),
        )
    }

    fn reduce(&self, axis: usize, mean: bool) -> Result<Var<'g>> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(if mean { "mean" } else { "sum" }, &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.unary(
            if mean { "mean" } else { "sum" },
            |t| {
                let v = t.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &v[(o * len + l) * inner..][..inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|x| *x /= len as f64);
                }
                Ok((out_shape.clone(), out))
            },
            Op::Reduce { a: self.id, outer, len, inner, mean },
        )
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        self.reduce(axis, false)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g>> {
        self.reduce(axis, true)
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum(&self) -> Result<Var<'g>> {
        self.unary(
            "sum",
            |t| Ok((Vec::new(), vec![t.data().iter().sum()])),
            Op::SumAll(self.id),
        )
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&self) -> Result<Var<'g>> {
        let cols = last_dim("softmax", &self.shape())?;
        self.unary(
            "softmax",
            |t| Ok((t.shape().to_vec(), softmax_rows(t.data(), cols))),
            Op::Softmax { a: self.id, cols },
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var<'g>> {
        let cols = last_dim("log_softmax", &self.shape())?;
        self.unary(
            "log_softmax",
            |t| {
                let mut out = Vec::with_capacity(t.numel());
                for row in t.data().chunks(cols) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    out.extend(row.iter().map(|v| v - lse));
                }
                Ok((t.shape().to_vec(), out))
            },
            Op::LogSoftmax { a: self.id, cols },
        )
    }

    /// Euclidean norm over the last axis, which is removed.
    pub fn l2_norm(&self) -> Result<Var<'g>> {
        let shape = self.shape();
        let cols = last_dim("l2_norm", &shape)?;
        let out_shape = shape[..shape.len() - 1].to_vec();
        self.unary(
            "l2_norm",
            |t| Ok((out_shape.clone(), row_norms(t.data(), cols))),
            Op::L2Norm { a: self.id, cols },
        )
    }

    /// Scales each last-axis row to unit length; rows with norm below
    /// [`NORM_EPS`] become zero.
    pub fn normalize_rows(&self) -> Result<Var<'g>> {
        let cols = last_dim("normalize_rows", &self.shape())?;
        self.unary(
            "normalize_rows",
            |t| {
                let norms = row_norms(t.data(), cols);
                let mut out = Vec::with_capacity(t.numel());
                for (row, n) in t.data().chunks(cols).zip(norms) {
                    if n > NORM_EPS {
                        out.extend(row.iter().map(|v| v / n));
                    } else {
                        out.extend(std::iter::repeat_n(0.0, row.len()));
                    }
                }
                Ok((t.shape().to_vec(), out))
            },
            Op::NormalizeRows { a: self.id, cols },
        )
    }

    /// Cosine similarity of matching rows of two `[n, d]` variables; a pair
    /// involving a zero row has similarity 0.
    pub fn cosine_rows(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        if a.rank() != 2 || a.shape() != b.shape() {
            return Err(Error::shape("cosine_rows", a.shape(), b.shape()));
        }
        let (n, cols) = (a.shape()[0], a.shape()[1]);
        let na = row_norms(a.data(), cols);
        let nb = row_norms(b.data(), cols);
        let data: Vec<f64> = (0..n)
            .map(|r| {
                if na[r] <= NORM_EPS || nb[r] <= NORM_EPS {
                    0.0
                } else {
                    let dot: f64 = a.row(r).iter().zip(b.row(r)).map(|(x, y)| x * y).sum();
                    dot / (na[r] * nb[r])
                }
            })
            .collect();
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        drop(nodes);
        self.graph.push_checked(
            "cosine_rows",
            vec![n],
            data,
            Op::CosineRows { a: self.id, b: other.id, cols },
            rg,
        )
    }

    /// Gathers slices along axis 0; indices may repeat.
    pub fn index_select(&self, indices: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        let rows = *shape.first().ok_or_else(|| Error::shape("index_select", &shape, &[]))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("index_select", &shape, &[bad]));
        }
        let row: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        self.unary(
            "index_select",
            |t| {
                let mut out = Vec::with_capacity(indices.len() * row);
                for &i in indices {
                    out.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
                }
                Ok((out_shape.clone(), out))
            },
            Op::IndexSelect { a: self.id, indices: indices.to_vec(), row },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let cur = self.shape();
        if cur.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::shape("reshape", &cur, shape));
        }
        self.unary(
            "reshape",
            |t| Ok((shape.to_vec(), t.data().to_vec())),
            Op::Reshape(self.id),
        )
    }

    /// 1-D cross-correlation: `[B, Cin, L] * [Cout, Cin, k] + bias[Cout]`.
    /// Output length is `floor((L + 2 * padding - k) / stride) + 1`.
    pub fn conv1d(&self, kernel: Var<'g>, bias: Var<'g>, stride: usize, padding: usize) -> Result<Var<'g>> {
        self.same_graph(&kernel);
        self.same_graph(&bias);
        let nodes = self.graph.nodes.borrow();
        let (x, w, b) = (&nodes[self.id].value, &nodes[kernel.id].value, &nodes[bias.id].value);
        if x.rank() != 3 || w.rank() != 3 || x.shape()[1] != w.shape()[1] {
            return Err(Error::shape("conv1d", x.shape(), w.shape()));
        }
        if b.shape() != [w.shape()[0]] {
            return Err(Error::shape("conv1d", w.shape(), b.shape()));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be positive".into()));
        }
        let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        if len + 2 * padding < k || k == 0 {
            return Err(Error::shape("conv1d", x.shape(), w.shape()));
        }
        let lout = (len + 2 * padding - k) / stride + 1;
        let geom = ConvGeom { batch, cin, len, cout, k, stride, pad: padding, lout };
        let data = kernels::conv1d_forward(x.data(), w.data(), b.data(), &geom);
        let rg = nodes[self.id].requires_grad || nodes[kernel.id].requires_grad || nodes[bias.id].requires_grad;
        drop(nodes);
        self.graph.push_checked(
            "conv1d",
            vec![batch, cout, lout],
            data,
            Op::Conv1d { x: self.id, w: kernel.id, bias: bias.id, geom },
            rg,
        )
    }

    /// Non-overlapping max pooling of width `width` over the last axis.
    pub fn max_pool1d(&self, width: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        let len = *shape.last().unwrap_or(&0);
        if width == 0 || len < width {
            return Err(Error::shape("max_pool1d", &shape, &[width]));
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let (data, argmax) = {
            let nodes = self.graph.nodes.borrow();
            kernels::max_pool_forward(nodes[self.id].value.data(), rows, len, width)
        };
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len / width;
        let rg = self.requires_grad();
        self.graph
            .push_checked("max_pool1d", out_shape, data, Op::MaxPool { x: self.id, argmax }, rg)
    }

    /// Batch normalisation of a `[B, C, L]` variable.
    ///
    /// In [`BnMode::TrainStats`] the current batch statistics are used and
    /// `stats` is refreshed with momentum; in [`BnMode::RunningStats`] the
    /// stored statistics are used and left untouched.
    pub fn batch_norm1d(
        &self,
        gamma: Var<'g>,
        beta: Var<'g>,
        stats: &mut RunningStats,
        mode: BnMode,
        eps: f64,
    ) -> Result<Var<'g>> {
        self.same_graph(&gamma);
        self.same_graph(&beta);
        let nodes = self.graph.nodes.borrow();
        let x = &nodes[self.id].value;
        if x.rank() != 3 {
            return Err(Error::shape("batch_norm1d", x.shape(), &[]));
        }
        let (batch, channels, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (g, b) = (&nodes[gamma.id].value, &nodes[beta.id].value);
        if g.shape() != [channels] || b.shape() != [channels] || stats.mean.len() != channels {
            return Err(Error::shape("batch_norm1d", x.shape(), g.shape()));
        }
        let (out, saved) = match mode {
            BnMode::TrainStats => {
                if batch * len < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "batch norm needs at least 2 values per channel, got {}",
                        batch * len
                    )));
                }
                let (mean, var) = kernels::channel_moments(x.data(), batch, channels, len);
                let r = kernels::batch_norm_forward(
                    x.data(), g.data(), b.data(), &mean, &var, eps, (batch, channels, len), true,
                );
                stats.update(&mean, &var, batch * len);
                r
            }
            BnMode::RunningStats => kernels::batch_norm_forward(
                x.data(), g.data(), b.data(), &stats.mean, &stats.var, eps, (batch, channels, len), false,
            ),
        };
        let rg = nodes[self.id].requires_grad || nodes[gamma.id].requires_grad || nodes[beta.id].requires_grad;
        drop(nodes);
        self.graph.push_checked(
            "batch_norm1d",
            vec![batch, channels, len],
            out,
            Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, saved },
            rg,
        )
    }
}
