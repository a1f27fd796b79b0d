//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. Node ids are assigned in creation order, so the
//! tape is already topologically sorted and [`Graph::backward`] walks it in
//! reverse exactly once.
//!
//! Broadcasting is limited to the handful of cases a transformer needs:
//! bias rows ([`Graph::add_bias`]) and per-position rows ([`Graph::add_rows`]).

use std::sync::Arc;

use super::numeric::{self, Precision};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    AddRows(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    /// Saves `tanh` of the inner argument for the backward pass.
    Gelu(Var, Vec<f64>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    InsertRows {
        x: Var,
        tokens: Var,
        batch: usize,
        at: usize,
    },
    RemoveRows {
        x: Var,
        batch: usize,
        at: usize,
        count: usize,
    },
    SelectRow {
        x: Var,
        batch: usize,
        index: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single forward computation and its gradients.
///
/// Graphs are built per step and are not shared between threads.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    precision: Precision,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// `tanh` through one `exp`, which is several times cheaper than the libm
/// routine and accurate to a few ulps.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    if u.abs() < 1e-4 {
        return u - u * u * u / 3.0;
    }
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

fn gelu_tanh(x: f64) -> f64 {
    fast_tanh(GELU_C * (x + GELU_K * x * x * x))
}

fn gelu_grad_scalar(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`, via an explicit transpose so the inner
/// loop is a contiguous axpy.
fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    matmul_acc(g, &bt, out, m, n, k);
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            precision: numeric::precision(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Adds a leaf without copying its storage.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradient of a leaf after [`Graph::backward`]. `None` for frozen leaves.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) || !node.requires_grad {
            return None;
        }
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, mut data: Vec<f64>, op: Op) -> Result<Var> {
        self.precision.round_slice(&mut data);
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(Tensor::from_parts(shape, data)),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::AddRows(a, b) => vec![a, b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(x, _) | Op::Sum(x) | Op::Gelu(x, _) | Op::Softmax(x) => vec![x],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::InsertRows { x, tokens, .. } => vec![x, tokens],
            Op::RemoveRows { x, .. } | Op::SelectRow { x, .. } => vec![x],
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("{op} expects a matrix"),
            });
        }
        Ok((shape[0], shape[1]))
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// Adds a bias vector `b[n]` to every row of `x[...×n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.value(x).as_matrix_dims();
        if self.value(b).numel() != n {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            add_into(row, bias);
        }
        let shape = self.shape(x).to_vec();
        self.push("add_bias", shape, out, Op::AddBias(x, b))
    }

    /// Adds `rows[T×d]` to each of the `batch` consecutive `T×d` blocks of `x`.
    pub fn add_rows(&mut self, x: Var, rows: Var) -> Result<Var> {
        let xv = self.value(x);
        let rv = self.value(rows);
        if !xv.numel().is_multiple_of(rv.numel()) || xv.as_matrix_dims().1 != rv.as_matrix_dims().1 {
            return Err(Error::Shape {
                op: "add_rows",
                lhs: xv.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let block = rv.numel();
        let mut out = xv.data().to_vec();
        for chunk in out.chunks_mut(block) {
            add_into(chunk, rv.data());
        }
        let shape = xv.shape().to_vec();
        self.push("add_rows", shape, out, Op::AddRows(x, rows))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op_name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op_name)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(op_name, shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale(x, s))
    }

    /// Sum of all elements, accumulated sequentially over the flat index.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push("sum", vec![1], vec![total], Op::Sum(x))
    }

    /// Tanh-approximated GELU, `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).data();
        let tanh: Vec<f64> = xv.iter().map(|&v| gelu_tanh(v)).collect();
        let out = xv.iter().zip(&tanh).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, out, Op::Gelu(x, tanh))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, d) = self.value(x).as_matrix_dims();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_row(row);
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, out, Op::Softmax(x))
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.value(x).as_matrix_dims();
        for p in [gain, bias] {
            if self.value(p).numel() != d {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("layer_norm", shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch·T × d]` with heads laid out as contiguous
    /// column blocks of width `d / heads`. Scores are scaled by
    /// `1/sqrt(d / heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (rows, d) = self.matrix_dims(q, "attention")?;
        if heads == 0 || d % heads != 0 || batch == 0 || rows % batch != 0 {
            return Err(Error::InvalidShape {
                shape: self.shape(q).to_vec(),
                reason: format!("cannot split into batch {batch} and {heads} heads"),
            });
        }
        let t = rows / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * t * t];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                for i in 0..t {
                    let qi = &qd[(b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh];
                    let prow = &mut p[i * t..(i + 1) * t];
                    for (j, s) in prow.iter_mut().enumerate() {
                        let kj = &kd[(b * t + j) * d + h * dh..(b * t + j) * d + (h + 1) * dh];
                        *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    softmax_row(prow);
                    self.precision.round_slice(prow);
                    let orow = &mut out[(b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh];
                    for (j, &pij) in prow.iter().enumerate() {
                        let vj = &vd[(b * t + j) * d + h * dh..(b * t + j) * d + (h + 1) * dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
            }
        }
        self.push(
            "attention",
            vec![rows, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
        )
    }

    /// Mean softmax cross-entropy over the rows of `logits[B×C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.matrix_dims(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let z = self.value(logits).data();
        let mut probs = z.to_vec();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let zr = &z[r * c..(r + 1) * c];
            let max = zr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + zr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - zr[labels[r]];
            softmax_row(row);
        }
        self.push(
            "cross_entropy",
            vec![1],
            vec![total / b as f64],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Inserts the rows of `tokens[P×d]` at position `at` of every sequence
    /// in `x[batch·N × d]`, giving `[batch·(N+P) × d]`.
    pub fn insert_rows(&mut self, x: Var, tokens: Var, batch: usize, at: usize) -> Result<Var> {
        let (rows, d) = self.matrix_dims(x, "insert_rows")?;
        let (p, d2) = self.matrix_dims(tokens, "insert_rows")?;
        if d != d2 || batch == 0 || rows % batch != 0 || at > rows / batch {
            return Err(Error::Shape {
                op: "insert_rows",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(tokens).to_vec(),
            });
        }
        let n = rows / batch;
        let xd = self.value(x).data();
        let td = self.value(tokens).data();
        let mut out = Vec::with_capacity(batch * (n + p) * d);
        for b in 0..batch {
            let seq = &xd[b * n * d..(b + 1) * n * d];
            out.extend_from_slice(&seq[..at * d]);
            out.extend_from_slice(td);
            out.extend_from_slice(&seq[at * d..]);
        }
        self.push(
            "insert_rows",
            vec![batch * (n + p), d],
            out,
            Op::InsertRows { x, tokens, batch, at },
        )
    }

    /// Drops `count` rows starting at `at` from every sequence.
    pub fn remove_rows(&mut self, x: Var, batch: usize, at: usize, count: usize) -> Result<Var> {
        let (rows, d) = self.matrix_dims(x, "remove_rows")?;
        if batch == 0 || rows % batch != 0 || at + count > rows / batch || count >= rows / batch {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: format!("cannot remove {count} rows at {at} per sequence of batch {batch}"),
            });
        }
        let t = rows / batch;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(batch * (t - count) * d);
        for b in 0..batch {
            let seq = &xd[b * t * d..(b + 1) * t * d];
            out.extend_from_slice(&seq[..at * d]);
            out.extend_from_slice(&seq[(at + count) * d..]);
        }
        self.push(
            "remove_rows",
            vec![batch * (t - count), d],
            out,
            Op::RemoveRows { x, batch, at, count },
        )
    }

    /// Picks row `index` of every sequence, giving `[batch × d]`.
    pub fn select_row(&mut self, x: Var, batch: usize, index: usize) -> Result<Var> {
        let (rows, d) = self.matrix_dims(x, "select_row")?;
        if batch == 0 || rows % batch != 0 || index >= rows / batch {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: format!("row {index} out of range for batch {batch}"),
            });
        }
        let t = rows / batch;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(batch * d);
        for b in 0..batch {
            out.extend_from_slice(&xd[(b * t + index) * d..(b * t + index + 1) * d]);
        }
        self.push("select_row", vec![batch, d], out, Op::SelectRow { x, batch, index })
    }

    /// Back-propagates from the scalar `loss`, populating the gradient of
    /// every leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            self.precision.round_slice(&mut g);
            self.backward_node(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            } else if let Some(g) = grads[i].as_mut() {
                self.precision.round_slice(g);
            } else {
                // Leaf unreachable from the loss: its gradient is zero.
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let numel = |v: Var| nodes[v.0].value.numel();
        fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.as_matrix_dims();
                let n = nodes[b.0].value.shape()[1];
                if wants(a) {
                    matmul_bt_acc(g, val(b), slot(grads, a, m * k), m, k, n);
                }
                if wants(b) {
                    matmul_at_acc(val(a), g, slot(grads, b, k * n), m, k, n);
                }
            }
            &Op::AddBias(x, b) => {
                if wants(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
                if wants(b) {
                    let n = numel(b);
                    let gb = slot(grads, b, n);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::AddRows(x, rows) => {
                if wants(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
                if wants(rows) {
                    let n = numel(rows);
                    let gr = slot(grads, rows, n);
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if wants(b) {
                    for (d, s) in slot(grads, b, g.len()).iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b);
                    for ((d, s), y) in slot(grads, a, g.len()).iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if wants(b) {
                    let av = val(a);
                    for ((d, s), x) in slot(grads, b, g.len()).iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            &Op::Scale(x, s) => {
                for (d, gv) in slot(grads, x, g.len()).iter_mut().zip(g) {
                    *d += gv * s;
                }
            }
            &Op::Sum(x) => {
                let n = numel(x);
                for d in slot(grads, x, n).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Gelu(x, tanh) => {
                let xv = val(*x);
                for (((d, gv), &xi), &t) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(xv).zip(tanh) {
                    *d += gv * gelu_grad_scalar(xi, t);
                }
            }
            &Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let d = nodes[i].value.as_matrix_dims().1;
                let gx = slot(grads, x, g.len());
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = numel(gain);
                if wants(gain) {
                    let gg = slot(grads, gain, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, gv), hv) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += gv * hv;
                        }
                    }
                }
                if wants(bias) {
                    let gb = slot(grads, bias, d);
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if wants(x) {
                    let gain_v = val(gain);
                    let gx = slot(grads, x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..d {
                            dxhat[c] = gr[c] * gain_v[c];
                            mean_d += dxhat[c];
                            mean_dh += dxhat[c] * hr[c];
                        }
                        mean_d /= d as f64;
                        mean_dh /= d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for c in 0..d {
                            out[c] += rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => {
                let (q, k, v, batch, heads) = (*q, *k, *v, *batch, *heads);
                let (rows, d) = nodes[q.0].value.as_matrix_dims();
                let t = rows / batch;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(q), val(k), val(v));
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; rows * d];
                let mut gv = vec![0.0; rows * d];
                let mut dp = vec![0.0; t];
                let cols = |r: usize, h: usize| (r * d + h * dh)..(r * d + (h + 1) * dh);
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                        for i in 0..t {
                            let gi = &g[cols(b * t + i, h)];
                            let prow = &p[i * t..(i + 1) * t];
                            let mut dot = 0.0;
                            for j in 0..t {
                                let vj = &vd[cols(b * t + j, h)];
                                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot += prow[j] * dp[j];
                                let gvj = &mut gv[cols(b * t + j, h)];
                                for (o, &x) in gvj.iter_mut().zip(gi) {
                                    *o += prow[j] * x;
                                }
                            }
                            let qi = &qd[cols(b * t + i, h)];
                            for j in 0..t {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kd[cols(b * t + j, h)];
                                let gqi = &mut gq[cols(b * t + i, h)];
                                for (o, &x) in gqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let gkj = &mut gk[cols(b * t + j, h)];
                                for (o, &x) in gkj.iter_mut().zip(qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                for (var, contrib) in [(q, gq), (k, gk), (v, gv)] {
                    if wants(var) {
                        add_into(slot(grads, var, rows * d), &contrib);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                let c = nodes[logits.0].value.as_matrix_dims().1;
                let b = labels.len() as f64;
                let gl = slot(grads, logits, probs.len());
                for (r, (pr, out)) in probs.chunks(c).zip(gl.chunks_mut(c)).enumerate() {
                    for (j, (o, &pv)) in out.iter_mut().zip(pr).enumerate() {
                        let target = if j == labels[r] { 1.0 } else { 0.0 };
                        *o += g[0] * (pv - target) / b;
                    }
                }
            }
            &Op::InsertRows { x, tokens, batch, at } => {
                let (rows, d) = nodes[x.0].value.as_matrix_dims();
                let n = rows / batch;
                let p = nodes[tokens.0].value.as_matrix_dims().0;
                let t = n + p;
                if wants(x) {
                    let gx = slot(grads, x, rows * d);
                    for b in 0..batch {
                        let src = &g[b * t * d..(b + 1) * t * d];
                        let dst = &mut gx[b * n * d..(b + 1) * n * d];
                        add_into(&mut dst[..at * d], &src[..at * d]);
                        add_into(&mut dst[at * d..], &src[(at + p) * d..]);
                    }
                }
                if wants(tokens) {
                    let gt = slot(grads, tokens, p * d);
                    for b in 0..batch {
                        add_into(gt, &g[(b * t + at) * d..(b * t + at + p) * d]);
                    }
                }
            }
            &Op::RemoveRows { x, batch, at, count } => {
                let (rows, d) = nodes[x.0].value.as_matrix_dims();
                let t = rows / batch;
                let kept = t - count;
                let gx = slot(grads, x, rows * d);
                for b in 0..batch {
                    let src = &g[b * kept * d..(b + 1) * kept * d];
                    let dst = &mut gx[b * t * d..(b + 1) * t * d];
                    add_into(&mut dst[..at * d], &src[..at * d]);
                    add_into(&mut dst[(at + count) * d..], &src[at * d..]);
                }
            }
            &Op::SelectRow { x, batch, index } => {
                let (rows, d) = nodes[x.0].value.as_matrix_dims();
                let t = rows / batch;
                let gx = slot(grads, x, rows * d);
                for b in 0..batch {
                    add_into(&mut gx[(b * t + index) * d..(b * t + index + 1) * d], &g[b * d..(b + 1) * d]);
                }
            }
        }
    }
}
