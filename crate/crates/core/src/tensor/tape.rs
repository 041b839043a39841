//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends one node whose inputs are earlier nodes, so the node
//! vector is already in topological order and `backward` is a single reverse
//! sweep. Leaves are either parameters (gradients requested) or constants.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::kernels::{gemm_nt, gemm_tn, transpose};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op kinds, exposed so a harness can target one backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    SoftmaxRows,
    LayerNorm,
    Gelu,
    Relu,
    Dropout,
    SliceRows,
    SliceCols,
    ConcatRows,
    ConcatCols,
    GatherRows,
    Sum,
    RowSum,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// Keeps the tanh term for the backward pass.
    Gelu(Var, Vec<f64>),
    Relu(Var),
    Dropout(Var, Vec<f64>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    RowSum(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Relu(_) => OpKind::Relu,
            Op::Dropout(..) => OpKind::Dropout,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::Sum(_) => OpKind::Sum,
            Op::RowSum(_) => OpKind::RowSum,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    #[cfg(feature = "fault-injection")]
    fault: Option<(OpKind, f64)>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros shaped like its value when unreachable.
    pub fn wrt(&self, tape: &Tape, var: Var) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(var).shape()),
        }
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu_tanh(x: f64) -> f64 {
    libm::tanh(GELU_C * (x + GELU_A * x * x * x))
}

fn gelu_grad_scalar(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// Multiplies the input gradients of every `kind` node by `factor`.
    #[cfg(feature = "fault-injection")]
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            let name = match op.kind() {
                OpKind::MatMul => "matmul",
                OpKind::SoftmaxRows => "softmax_rows",
                OpKind::LayerNorm => "layer_norm",
                OpKind::Gelu => "gelu",
                _ => "elementwise op",
            };
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let out = Tensor::new(vec![c, r], transpose(t.data(), r, c))?;
        self.push(out, Op::Transpose(a), &[a])
    }

    fn zip_with(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb, op)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.len() != ta.cols() {
            return Err(dim_err("add_row", ta, tr));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (x, &b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * factor).collect())?;
        self.push(out, Op::Scale(a, factor), &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = libm::exp(*x - max);
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row normalization to zero mean and unit variance, then `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.len() != d {
            return Err(dim_err("layer_norm", tx, tg));
        }
        if tb.len() != d {
            return Err(dim_err("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let tanh: Vec<f64> = t.data().iter().map(|&x| gelu_tanh(x)).collect();
        let vals = t.data().iter().zip(&tanh).map(|(&x, &th)| 0.5 * x * (1.0 + th)).collect();
        let out = Tensor::new(t.shape().to_vec(), vals)?;
        self.push(out, Op::Gelu(a, tanh), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x.max(0.0)).collect())?;
        self.push(out, Op::Relu(a), &[a])
    }

    /// Inverted dropout. Identity (same handle) when not training or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Dropout(a, mask), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.rows() {
            return Err(Error::Index {
                index: start + len,
                len: t.rows(),
            });
        }
        let n = t.cols();
        let out = Tensor::new(vec![len, n], t.data()[start * n..(start + len) * n].to_vec())?;
        self.push(out, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(Error::Index {
                index: start + len,
                len: t.cols(),
            });
        }
        let n = t.cols();
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(vec![t.rows(), len], data)?;
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let n = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(dim_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(dim_err("concat_cols", self.value(*first), t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Picks rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let n = t.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= t.rows() {
                return Err(Error::Index { index: i, len: t.rows() });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), n], data)?;
        self.push(out, Op::GatherRows(table, idx.to_vec()), &[table])
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Per-row sums as an `m × 1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let out = Tensor::new(vec![t.rows(), 1], data)?;
        self.push(out, Op::RowSum(a), &[a])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let contributions = self.input_grads(&node.op, &node.value, &g);
            for (var, mut grad) in contributions {
                #[cfg(feature = "fault-injection")]
                if let Some((kind, factor)) = self.fault {
                    if kind == node.op.kind() {
                        for x in grad.data_mut() {
                            *x *= factor;
                        }
                    }
                }
                if !grad.is_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => {
                        grad = grad.reshape(self.value(var).shape())?;
                        *slot = Some(grad);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, op: &Op, out: &Tensor, g: &Tensor) -> Vec<(Var, Tensor)> {
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g.data(), tb.data(), &mut da, m, n, k);
                    res.push((*a, Tensor::new(vec![m, k], da).expect("shape")));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(ta.data(), g.data(), &mut db, m, k, n);
                    res.push((*b, Tensor::new(vec![k, n], db).expect("shape")));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.rows(), g.cols());
                res.push((*a, Tensor::new(vec![c, r], transpose(g.data(), r, c)).expect("shape")));
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    res.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    res.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    res.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    let neg = g.data().iter().map(|x| -x).collect();
                    res.push((*b, Tensor::new(g.shape().to_vec(), neg).expect("shape")));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    res.push((*a, Tensor::new(g.shape().to_vec(), d).expect("shape")));
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    res.push((*b, Tensor::new(g.shape().to_vec(), d).expect("shape")));
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    res.push((*a, g.clone()));
                }
                if self.needs(*row) {
                    let n = g.cols();
                    let mut d = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (acc, x) in d.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    res.push((*row, Tensor::new(vec![n], d).expect("shape")));
                }
            }
            Op::Scale(a, f) => {
                let d = g.data().iter().map(|x| x * f).collect();
                res.push((*a, Tensor::new(g.shape().to_vec(), d).expect("shape")));
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut d = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        d[r * n + c] = y[c] * (gr[c] - dot);
                    }
                }
                res.push((*a, Tensor::new(out.shape().to_vec(), d).expect("shape")));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gain);
                let d = out.cols();
                let rows = out.rows();
                if self.needs(*gain) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g.data()[r * d + c] * xhat[r * d + c];
                        }
                    }
                    res.push((*gain, Tensor::new(vec![d], dg).expect("shape")));
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for (acc, v) in db.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    res.push((*bias, Tensor::new(vec![d], db).expect("shape")));
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * d];
                    let df = d as f64;
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..d {
                            let dh = g.data()[r * d + c] * tg.data()[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + c];
                        }
                        for c in 0..d {
                            let dh = g.data()[r * d + c] * tg.data()[c];
                            dx[r * d + c] =
                                rstd[r] / df * (df * dh - sum_dh - xhat[r * d + c] * sum_dh_h);
                        }
                    }
                    res.push((*x, Tensor::new(out.shape().to_vec(), dx).expect("shape")));
                }
            }
            Op::Gelu(a, tanh) => {
                let ta = self.value(*a);
                let d = ta
                    .data()
                    .iter()
                    .zip(tanh)
                    .zip(g.data())
                    .map(|((&x, &th), gv)| gelu_grad_scalar(x, th) * gv)
                    .collect();
                res.push((*a, Tensor::new(g.shape().to_vec(), d).expect("shape")));
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let d = ta
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, gv)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                res.push((*a, Tensor::new(g.shape().to_vec(), d).expect("shape")));
            }
            Op::Dropout(a, mask) => {
                let d = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                res.push((*a, Tensor::new(g.shape().to_vec(), d).expect("shape")));
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let mut d = vec![0.0; ta.len()];
                d[start * n..start * n + g.len()].copy_from_slice(g.data());
                res.push((*a, Tensor::new(ta.shape().to_vec(), d).expect("shape")));
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let w = g.cols();
                let mut d = vec![0.0; ta.len()];
                for r in 0..g.rows() {
                    d[r * n + start..r * n + start + w].copy_from_slice(g.row(r));
                }
                res.push((*a, Tensor::new(ta.shape().to_vec(), d).expect("shape")));
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let len = t.rows() * n;
                    if self.needs(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        res.push((p, Tensor::new(t.shape().to_vec(), d).expect("shape")));
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let w = t.cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(t.len());
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        res.push((p, Tensor::new(t.shape().to_vec(), d).expect("shape")));
                    }
                    offset += w;
                }
            }
            Op::GatherRows(table, idx) => {
                let t = self.value(*table);
                let n = t.cols();
                let mut d = vec![0.0; t.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for (acc, v) in d[i * n..(i + 1) * n].iter_mut().zip(g.row(k)) {
                        *acc += v;
                    }
                }
                res.push((*table, Tensor::new(t.shape().to_vec(), d).expect("shape")));
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                res.push((*a, Tensor::filled(ta.shape(), g.data()[0])));
            }
            Op::RowSum(a) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let mut d = vec![0.0; ta.len()];
                for r in 0..ta.rows() {
                    for x in &mut d[r * n..(r + 1) * n] {
                        *x = g.data()[r];
                    }
                }
                res.push((*a, Tensor::new(ta.shape().to_vec(), d).expect("shape")));
            }
        }
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    /// Central differences of `f` at every coordinate of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| libm::fabs(x - y) / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    /// Checks d(sum(w ∘ op(x)))/dx against finite differences; `w` makes the
    /// reduction non-trivial for ops whose plain sum has zero gradient.
    fn check_unary(op: impl Fn(&mut Tape, Var) -> Var, shape: &[usize], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, shape);
        let eval = |xv: &Tensor, w: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.param(xv.clone());
            let y = op(&mut tape, xv);
            let wv = tape.constant(w.clone());
            let p = tape.mul(y, wv).unwrap();
            let s = tape.sum(p).unwrap();
            (tape, xv, s)
        };
        let probe = {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let y = op(&mut tape, xv);
            tape.value(y).shape().to_vec()
        };
        let w = random(&mut rng, &probe);
        let (tape, xv, s) = eval(&x, &w);
        let analytic = tape.backward(s).unwrap().wrt(&tape, xv);
        let numeric = numeric_grad(&x, &|xp| {
            let (t, _, s) = eval(xp, &w);
            t.value(s).data()[0]
        });
        assert!(rel_err(&analytic, &numeric) < 1e-4, "rel err {}", rel_err(&analytic, &numeric));
    }

    #[test]
    fn matmul_gradient_of_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[4, 5]);
        let b = random(&mut rng, &[5, 2]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c).unwrap();
        let grad = tape.backward(s).unwrap().wrt(&tape, va);
        // ones(4×2) · bᵀ via finite differences
        let numeric = numeric_grad(&a, &|ap| super::super::matmul(ap, &b).unwrap().sum());
        assert!(rel_err(&grad, &numeric) < 1e-4);
        let expected = super::super::matmul(&Tensor::ones(&[4, 2]), &{
            let mut t = Tape::new();
            let v = t.constant(b.clone());
            let tv = t.transpose(v).unwrap();
            t.value(tv).clone()
        })
        .unwrap();
        assert!(grad.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn matmul_gradients_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random(&mut rng, &[3, 4]);
        check_unary(
            move |t, x| {
                let bv = t.constant(b.clone());
                t.matmul(x, bv).unwrap()
            },
            &[2, 3],
            11,
        );
        let a = random(&mut rng, &[2, 3]);
        check_unary(
            move |t, x| {
                let av = t.constant(a.clone());
                t.matmul(av, x).unwrap()
            },
            &[3, 4],
            12,
        );
    }

    #[test]
    fn elementwise_gradients() {
        check_unary(|t, x| t.gelu(x).unwrap(), &[3, 4], 1);
        check_unary(|t, x| t.softmax_rows(x).unwrap(), &[3, 5], 2);
        check_unary(|t, x| t.transpose(x).unwrap(), &[3, 5], 3);
        check_unary(|t, x| t.scale(x, -2.5).unwrap(), &[2, 2], 4);
        check_unary(|t, x| t.mul(x, x).unwrap(), &[2, 3], 5);
        check_unary(|t, x| t.sub(x, x).unwrap(), &[2, 3], 6);
        check_unary(|t, x| t.row_sum(x).unwrap(), &[4, 3], 8);
        check_unary(
            |t, x| {
                let a = t.slice_rows(x, 1, 2).unwrap();
                let xt = t.transpose(x).unwrap();
                let c = t.concat_cols(&[a, a]).unwrap();
                let d = t.concat_rows(&[xt, xt]).unwrap();
                let cd = t.matmul(c, d).unwrap();
                let e = t.slice_cols(x, 1, 2).unwrap();
                t.matmul(cd, e).unwrap()
            },
            &[4, 3],
            9,
        );
        check_unary(|t, x| t.gather_rows(x, &[2, 0, 2]).unwrap(), &[3, 4], 10);
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let x = Tensor::from_rows(&[vec![-1.0, 0.5, 2.0]]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(x);
        let r = tape.relu(v).unwrap();
        let s = tape.sum(r).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(&tape, v).data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let gain = random(&mut rng, &[6]);
        let bias = random(&mut rng, &[6]);
        let (g2, b2) = (gain.clone(), bias.clone());
        check_unary(
            move |t, x| {
                let g = t.constant(g2.clone());
                let b = t.constant(b2.clone());
                t.layer_norm(x, g, b).unwrap()
            },
            &[3, 6],
            22,
        );
        let x = random(&mut rng, &[3, 6]);
        check_unary(
            move |t, g| {
                let xv = t.constant(x.clone());
                let b = t.constant(bias.clone());
                t.layer_norm(xv, g, b).unwrap()
            },
            &[6],
            23,
        );
    }

    #[test]
    fn add_row_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random(&mut rng, &[3, 4]);
        check_unary(
            move |t, r| {
                let av = t.constant(a.clone());
                t.add_row(av, r).unwrap()
            },
            &[4],
            32,
        );
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![3.7]]).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0]);

        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        let got = tape.value(s).data();
        let denom = libm::exp(1.0) + libm::exp(2.0) + libm::exp(3.0);
        for (g, k) in got.iter().zip([1.0, 2.0, 3.0]) {
            assert!((g - libm::exp(k) / denom).abs() < 1e-15);
        }
        assert!((got[0] - 0.0900).abs() < 1e-4);
        assert!((got[1] - 0.2447).abs() < 1e-4);
        assert!((got[2] - 0.6652).abs() < 1e-4);

        // huge logits stay finite
        let x = tape.constant(Tensor::from_rows(&[vec![1e300, -1e300, 0.0]]).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::from_rows(&[vec![4.0, 4.0]]).unwrap());
        let y = tape.layer_norm(x, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
        let y = tape.layer_norm(x, g, b).unwrap();
        let expect = 1.0 / libm::sqrt(1.0 + LAYER_NORM_EPS);
        assert!((tape.value(y).data()[0] - expect).abs() < 1e-15);
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-5);

        let zero_gain = tape.constant(Tensor::zeros(&[3]));
        let bias = tape.constant(Tensor::from_rows(&[vec![0.5, -2.0, 7.0]]).unwrap());
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 9.0, -3.0]]).unwrap());
        let y = tape.layer_norm(x, zero_gain, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -2.0, 7.0]);

        let short = tape.constant(Tensor::ones(&[4]));
        assert!(tape.layer_norm(x, short, bias).is_err());
    }

    #[test]
    fn gelu_and_dropout_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 1]));
        let g = tape.gelu(z).unwrap();
        assert_eq!(tape.value(g).data(), &[0.0]);

        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let d = tape.dropout(x, 0.1, &mut rng, false).unwrap();
        assert_eq!(tape.value(d), tape.value(x));
        assert!(tape.dropout(x, 1.0, &mut rng, true).is_err());
        assert!(tape.dropout(x, -0.1, &mut rng, true).is_err());

        let ones = tape.constant(Tensor::ones(&[1, 10_000]));
        let d = tape.dropout(ones, 0.1, &mut rng, true).unwrap();
        let mean = tape.value(d).sum() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        for &v in tape.value(d).data() {
            assert!(v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15);
        }
    }

    #[test]
    fn simple_loss_gradients() {
        let w = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(w.clone());
        let s = tape.sum(v).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(&tape, v), Tensor::ones(&[2, 2]));

        let mut tape = Tape::new();
        let v = tape.param(w.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        assert_eq!(tape.backward(half).unwrap().wrt(&tape, v), w);
    }

    #[test]
    fn unreachable_params_get_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::ones(&[2, 2]));
        let b = tape.param(Tensor::ones(&[3]));
        let s = tape.sum(a).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.wrt(&tape, b), Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::ones(&[2, 2]));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_node_accumulates() {
        // d/dx sum(x + x + x) = 3
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[1, 3]));
        let y = tape.add(x, x).unwrap();
        let y = tape.add(y, x).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(&tape, x), Tensor::filled(&[1, 3], 3.0));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1e200]]).unwrap());
        assert!(matches!(tape.mul(x, x), Err(Error::NonFinite { .. })));
    }
}
