//! Dynamic tape for reverse-mode differentiation.
//!
//! Every forward op appends a node holding its value and the inputs it needs
//! for the vector-Jacobian product. The tape is rebuilt for each forward pass
//! and consumed by a single [`Graph::backward`] call.
//!
//! Activation taps mark nodes whose value and upstream gradient should be
//! snapshotted after backward; they feed first-order saliency estimates.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a tapped activation: the gate layer it belongs to and a slot
/// inside that layer (head index, expert index, or 0 for a whole FFN hidden).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TapId {
    pub layer: usize,
    pub slot: usize,
}

#[derive(Clone, Debug)]
pub struct TapRecord {
    pub tap_id: TapId,
    pub activation: Tensor,
    pub activation_grad: Tensor,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, axis: usize, inv_std: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Mean { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    Sum(Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Transpose(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    MergeRows { attended: Var, fill: Var, idx: Vec<usize> },
    ScatterAddRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RepeatRows(Var),
    Reshape(Var),
    GatherElems { x: Var, at: Vec<(usize, usize)> },
    ScaleRows(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | AddBias(a, b) | Mul(a, b) | MulScalar(a, b)
            | Mse(a, b) | ScaleRows(a, b) => vec![*a, *b],
            MergeRows { attended, fill, .. } => vec![*attended, *fill],
            Scale(x, _) | Gelu(x) | Relu(x) | Sigmoid(x) | Tanh(x) | Abs(x) | Sum(x)
            | Transpose(x) | RepeatRows(x) | Reshape(x) => vec![*x],
            Softmax { x, .. } | LayerNorm { x, .. } | Mean { x, .. } | SumAxis { x, .. }
            | GatherRows { x, .. } | ScatterAddRows { x, .. } | GatherElems { x, .. } => vec![*x],
            CrossEntropy { logits, .. } => vec![*logits],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Leaf that should receive a gradient.
    grad_leaf: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, ParamId), Var>,
    taps: Vec<(TapId, Var)>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

/// Iteration geometry for reducing along one axis of a row-major tensor.
#[derive(Clone, Copy)]
struct Lanes {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Lanes {
    fn of(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(shape_err!("axis {axis} out of range for shape {shape:?}"));
        }
        Ok(Lanes {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    fn count(&self) -> usize {
        self.outer * self.inner
    }

    /// Flat indices of lane `l`.
    fn indices(&self, l: usize) -> impl Iterator<Item = usize> {
        let (o, i) = (l / self.inner, l % self.inner);
        let (len, inner) = (self.len, self.inner);
        (0..len).map(move |k| (o * len + k) * inner + i)
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m×k)` times `bᵀ` where `b` is `n×k`.
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ` times `b` where `a` is `m×k` and `b` is `m×n`.
fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, grad_leaf: false });
        Var(self.nodes.len() - 1)
    }

    fn check_open(&self) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Contract("graph already consumed by backward".into()));
        }
        Ok(())
    }

    /// Records a leaf. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let grad_leaf = t.requires_grad();
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].grad_leaf = grad_leaf;
        v
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf)
    }

    /// Binds a stored parameter, reusing the node when bound twice.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.tag(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let t = store.get(id).clone();
        let v = self.leaf(t);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_matrix("matmul")?;
        bv.expect_matrix("matmul")?;
        let (m, k, k2, n) = (av.shape()[0], av.shape()[1], bv.shape()[0], bv.shape()[1]);
        if k != k2 {
            return Err(shape_err!("matmul {m}×{k} by {k2}×{n}"));
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err!("{op}: shapes {sa:?} and {sb:?} differ"));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("shape preserved");
        self.push(t, op)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a bias along the trailing axis: `x (r×c) + b (c)`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = *xv.shape().last().unwrap();
        if bv.numel() != c {
            return Err(shape_err!("bias of {} values for trailing axis {c}", bv.numel()));
        }
        let bias = bv.data();
        let data = xv.data().chunks(c).flat_map(|row| row.iter().zip(bias).map(|(a, b)| a + b)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err!("mul_scalar expects a one-element scale"));
        }
        let sv = self.value(s).data()[0];
        Ok(self.map(x, Op::MulScalar(x, s), |v| v * sv))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if !xv.all_finite() {
            return Err(Error::Domain("softmax input is not finite".into()));
        }
        let lanes = Lanes::of(xv.shape(), axis)?;
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for l in 0..lanes.count() {
            let max = lanes.indices(l).map(|i| src[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in lanes.indices(l) {
                out[i] = (src[i] - max).exp();
                total += out[i];
            }
            for i in lanes.indices(l) {
                out[i] /= total;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    /// Normalizes each lane along `axis` to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let lanes = Lanes::of(xv.shape(), axis)?;
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(lanes.count());
        let n = lanes.len as f64;
        for l in 0..lanes.count() {
            let mean = lanes.indices(l).map(|i| src[i]).sum::<f64>() / n;
            let var = lanes.indices(l).map(|i| (src[i] - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for i in lanes.indices(l) {
                out[i] = (src[i] - mean) * inv;
            }
            inv_std.push(inv);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, axis, inv_std }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), gelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, Op::Abs(x), f64::abs)
    }

    fn reduce(&mut self, x: Var, axis: usize, scale_by_len: bool) -> Result<Var> {
        let xv = self.value(x);
        let lanes = Lanes::of(xv.shape(), axis)?;
        let src = xv.data();
        let div = if scale_by_len { lanes.len as f64 } else { 1.0 };
        let out: Vec<f64> =
            (0..lanes.count()).map(|l| lanes.indices(l).map(|i| src[i]).sum::<f64>() / div).collect();
        let t = Tensor::new(reduced_shape(xv.shape(), axis), out)?;
        let op = if scale_by_len { Op::Mean { x, axis } } else { Op::SumAxis { x, axis } };
        Ok(self.push(t, op))
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = av.len() as f64;
        let s = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b)))
    }

    /// Mean softmax cross-entropy of `logits (B×C)` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        lv.expect_matrix("cross_entropy")?;
        let (b, c) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != b {
            return Err(shape_err!("{} labels for {b} rows of logits", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
        }
        if !lv.all_finite() {
            return Err(Error::Domain("cross_entropy logits are not finite".into()));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (j, v) in row.iter().enumerate() {
                probs[r * c + j] = (v - max).exp() / total;
            }
            if probs[r * c + y] <= 0.0 {
                return Err(Error::Domain(format!("log of nonpositive probability at row {r}")));
            }
            loss += total.ln() + max - row[y];
        }
        let t = Tensor::scalar(loss / b as f64);
        Ok(self.push(t, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_matrix("transpose")?;
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let src = xv.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x).select_rows(idx)?;
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Builds a matrix whose rows `idx` come from `attended` (in order) and
    /// whose other rows are copies of the single-row `fill`.
    pub fn merge_rows(&mut self, attended: Var, fill: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (av, fv) = (self.value(attended), self.value(fill));
        av.expect_matrix("merge_rows")?;
        let c = av.shape()[1];
        if av.shape()[0] != idx.len() || fv.numel() != c {
            return Err(shape_err!(
                "merge_rows: {} attended rows for {} indices, fill of {} values for {c} columns",
                av.shape()[0],
                idx.len(),
                fv.numel()
            ));
        }
        let mut out: Vec<f64> = fv.data().iter().copied().cycle().take(rows * c).collect();
        for (k, &r) in idx.iter().enumerate() {
            if r >= rows {
                return Err(shape_err!("merge_rows index {r} out of range for {rows} rows"));
            }
            out[r * c..(r + 1) * c].copy_from_slice(av.row(k));
        }
        let t = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(t, Op::MergeRows { attended, fill, idx: idx.to_vec() }))
    }

    /// Scatters row `k` of `x` into row `idx[k]` of a zero `rows×c` matrix, summing collisions.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_matrix("scatter_add_rows")?;
        let c = xv.shape()[1];
        if xv.shape()[0] != idx.len() {
            return Err(shape_err!("scatter_add_rows: {} rows for {} indices", xv.shape()[0], idx.len()));
        }
        let mut out = vec![0.0; rows * c];
        for (k, &r) in idx.iter().enumerate() {
            if r >= rows {
                return Err(shape_err!("scatter index {r} out of range for {rows} rows"));
            }
            out[r * c..(r + 1) * c].iter_mut().zip(xv.row(k)).for_each(|(o, v)| *o += v);
        }
        let t = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(t, Op::ScatterAddRows { x, idx: idx.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("concat_rows of nothing"))?;
        let c = self.value(*first).shape()[1];
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            pv.expect_matrix("concat_rows")?;
            if pv.shape()[1] != c {
                return Err(shape_err!("concat_rows: {} columns vs {c}", pv.shape()[1]));
            }
            rows += pv.shape()[0];
            out.extend_from_slice(pv.data());
        }
        let t = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("concat_cols of nothing"))?;
        let r = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            pv.expect_matrix("concat_cols")?;
            if pv.shape()[0] != r {
                return Err(shape_err!("concat_cols: {} rows vs {r}", pv.shape()[0]));
            }
            widths.push(pv.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![r, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Tiles a single row `n` times.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.numel();
        if xv.is_matrix() && xv.shape()[0] != 1 {
            return Err(shape_err!("repeat_rows expects one row, got {:?}", xv.shape()));
        }
        let out: Vec<f64> = xv.data().iter().copied().cycle().take(n * c).collect();
        let t = Tensor::new(vec![n, c], out)?;
        Ok(self.push(t, Op::RepeatRows(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Picks single elements `(row, col)` into an `n×1` column.
    pub fn gather_elems(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_matrix("gather_elems")?;
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Vec::with_capacity(at.len());
        for &(i, j) in at {
            if i >= r || j >= c {
                return Err(shape_err!("element ({i},{j}) out of range for {r}×{c}"));
            }
            out.push(xv.at(i, j));
        }
        let t = Tensor::new(vec![at.len(), 1], out)?;
        Ok(self.push(t, Op::GatherElems { x, at: at.to_vec() }))
    }

    /// Multiplies row `i` of `x` by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        xv.expect_matrix("scale_rows")?;
        if wv.numel() != xv.shape()[0] {
            return Err(shape_err!("scale_rows: {} weights for {} rows", wv.numel(), xv.shape()[0]));
        }
        let c = xv.shape()[1];
        let data = xv
            .data()
            .chunks(c)
            .zip(wv.data())
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::ScaleRows(x, w)))
    }

    pub fn register_tap(&mut self, node: Var, tap_id: TapId) -> Result<()> {
        if node.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("tap on unknown node {}", node.0)));
        }
        self.taps.push((tap_id, node));
        Ok(())
    }

    pub fn is_consumed(&self) -> bool {
        self.grads.is_some()
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_open()?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        // A node participates if it is a gradient leaf, a tap, or depends on one.
        let mut active = vec![false; self.nodes.len()];
        for &(_, v) in &self.taps {
            active[v.0] = true;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.grad_leaf || node.op.inputs().iter().any(|v| active[v.0]) {
                active[i] = true;
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !active[i] {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &active, &mut grads)?;
            grads[i] = Some(dy);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        dy: &[f64],
        active: &[bool],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut send = |v: &Var, g: Vec<f64>| {
            if !active[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        let val = |v: &Var| self.nodes[v.0].value.data();
        let shp = |v: &Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = shp(b)[1];
                if active[a.0] {
                    send(a, matmul_a_bt(dy, val(b), m, n, k));
                }
                if active[b.0] {
                    send(b, matmul_at_b(val(a), dy, m, k, n));
                }
            }
            Op::Add(a, b) => {
                send(a, dy.to_vec());
                send(b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                send(a, dy.to_vec());
                send(b, dy.iter().map(|g| -g).collect());
            }
            Op::AddBias(x, b) => {
                send(x, dy.to_vec());
                let c = val(b).len();
                let mut gb = vec![0.0; c];
                for row in dy.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                send(b, gb);
            }
            Op::Mul(a, b) => {
                send(a, dy.iter().zip(val(b)).map(|(g, v)| g * v).collect());
                send(b, dy.iter().zip(val(a)).map(|(g, v)| g * v).collect());
            }
            Op::Scale(x, s) => send(x, dy.iter().map(|g| g * s).collect()),
            Op::MulScalar(x, s) => {
                let sv = val(s)[0];
                send(x, dy.iter().map(|g| g * sv).collect());
                send(s, vec![dy.iter().zip(val(x)).map(|(g, v)| g * v).sum()]);
            }
            Op::Softmax { x, axis } => {
                let lanes = Lanes::of(shp(x), *axis)?;
                let mut dx = vec![0.0; y.len()];
                for l in 0..lanes.count() {
                    let dot: f64 = lanes.indices(l).map(|j| dy[j] * y[j]).sum();
                    for j in lanes.indices(l) {
                        dx[j] = y[j] * (dy[j] - dot);
                    }
                }
                send(x, dx);
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let lanes = Lanes::of(shp(x), *axis)?;
                let n = lanes.len as f64;
                let mut dx = vec![0.0; y.len()];
                for (l, inv) in inv_std.iter().enumerate() {
                    let mean_dy = lanes.indices(l).map(|j| dy[j]).sum::<f64>() / n;
                    let mean_dyy = lanes.indices(l).map(|j| dy[j] * y[j]).sum::<f64>() / n;
                    for j in lanes.indices(l) {
                        dx[j] = inv * (dy[j] - mean_dy - y[j] * mean_dyy);
                    }
                }
                send(x, dx);
            }
            Op::Gelu(x) => send(x, dy.iter().zip(val(x)).map(|(g, &v)| g * gelu_grad(v)).collect()),
            Op::Relu(x) => {
                send(x, dy.iter().zip(val(x)).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect())
            }
            Op::Sigmoid(x) => send(x, dy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()),
            Op::Tanh(x) => send(x, dy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect()),
            Op::Abs(x) => send(x, dy.iter().zip(val(x)).map(|(g, &v)| g * sign(v)).collect()),
            Op::Mean { x, axis } | Op::SumAxis { x, axis } => {
                let lanes = Lanes::of(shp(x), *axis)?;
                let div = if matches!(node.op, Op::Mean { .. }) { lanes.len as f64 } else { 1.0 };
                let mut dx = vec![0.0; val(x).len()];
                for (l, g) in dy.iter().enumerate() {
                    for j in lanes.indices(l) {
                        dx[j] = g / div;
                    }
                }
                send(x, dx);
            }
            Op::Sum(x) => send(x, vec![dy[0]; val(x).len()]),
            Op::Mse(a, b) => {
                let n = val(a).len() as f64;
                let d: Vec<f64> =
                    val(a).iter().zip(val(b)).map(|(p, q)| 2.0 * (p - q) / n * dy[0]).collect();
                send(b, d.iter().map(|v| -v).collect());
                send(a, d);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = shp(logits)[1];
                let scale = dy[0] / labels.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &lab) in labels.iter().enumerate() {
                    dx[r * c + lab] -= scale;
                }
                send(logits, dx);
            }
            Op::Transpose(x) => {
                let (r, c) = (shp(x)[0], shp(x)[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = dy[j * r + i];
                    }
                }
                send(x, dx);
            }
            Op::GatherRows { x, idx } => {
                let c = shp(x)[1];
                let mut dx = vec![0.0; val(x).len()];
                for (k, &r) in idx.iter().enumerate() {
                    dx[r * c..(r + 1) * c].iter_mut().zip(&dy[k * c..(k + 1) * c]).for_each(|(a, g)| *a += g);
                }
                send(x, dx);
            }
            Op::MergeRows { attended, fill, idx } => {
                let c = shp(attended)[1];
                let rows = node.value.shape()[0];
                let mut picked = vec![false; rows];
                let mut da = vec![0.0; idx.len() * c];
                for (k, &r) in idx.iter().enumerate() {
                    picked[r] = true;
                    da[k * c..(k + 1) * c].copy_from_slice(&dy[r * c..(r + 1) * c]);
                }
                let mut df = vec![0.0; c];
                for r in (0..rows).filter(|&r| !picked[r]) {
                    df.iter_mut().zip(&dy[r * c..(r + 1) * c]).for_each(|(a, g)| *a += g);
                }
                send(attended, da);
                send(fill, df);
            }
            Op::ScatterAddRows { x, idx } => {
                let c = shp(x)[1];
                let dx = idx.iter().flat_map(|&r| dy[r * c..(r + 1) * c].iter().copied()).collect();
                send(x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(p).len();
                    send(p, dy[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for p in parts {
                    let (r, w) = (shp(p)[0], shp(p)[1]);
                    let mut dx = Vec::with_capacity(r * w);
                    for i in 0..r {
                        dx.extend_from_slice(&dy[i * total + off..i * total + off + w]);
                    }
                    send(p, dx);
                    off += w;
                }
            }
            Op::RepeatRows(x) => {
                let c = val(x).len();
                let mut dx = vec![0.0; c];
                for row in dy.chunks(c) {
                    dx.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                send(x, dx);
            }
            Op::Reshape(x) => send(x, dy.to_vec()),
            Op::GatherElems { x, at } => {
                let c = shp(x)[1];
                let mut dx = vec![0.0; val(x).len()];
                for (k, &(i, j)) in at.iter().enumerate() {
                    dx[i * c + j] += dy[k];
                }
                send(x, dx);
            }
            Op::ScaleRows(x, w) => {
                let c = shp(x)[1];
                let wv = val(w);
                let dx = dy.chunks(c).zip(wv).flat_map(|(row, &s)| row.iter().map(move |g| g * s)).collect();
                let dw = dy.chunks(c).zip(val(x).chunks(c)).map(|(g, v)| g.iter().zip(v).map(|(a, b)| a * b).sum()).collect();
                send(x, dx);
                send(w, dw);
            }
        }
        Ok(())
    }

    /// Gradient of the loss with respect to `v`, after backward.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::Contract("gradients requested before backward".into()))?;
        let shape = self.value(v).shape().to_vec();
        let data = grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.value(v).numel()]);
        Tensor::new(shape, data)
    }

    /// Gradients of the parameters of `store` bound into this graph, by id.
    pub fn param_grads(&self, store: &ParamStore) -> Result<Vec<(ParamId, &[f64])>> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::Contract("gradients requested before backward".into()))?;
        let mut out: Vec<(ParamId, &[f64])> = self
            .params
            .iter()
            .filter(|((tag, _), _)| *tag == store.tag())
            .filter_map(|(&(_, id), v)| grads[v.0].as_deref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    pub fn collect_taps(&self) -> Result<Vec<TapRecord>> {
        if self.grads.is_none() {
            return Err(Error::Contract("collect_taps before backward: activation gradients are empty".into()));
        }
        self.taps
            .iter()
            .map(|&(tap_id, v)| {
                Ok(TapRecord { tap_id, activation: self.value(v).clone(), activation_grad: self.grad(v)? })
            })
            .collect()
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[3, 2]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 2]);
        assert_eq!(g.value(c).data(), &[3.0; 4]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[2, 2]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3]).with_requires_grad(true));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn mse_against_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[2.0]).with_requires_grad(true));
        let z = g.constant(Tensor::zeros(&[1]));
        let l = g.mse(x, z).unwrap();
        g.backward(l).unwrap();
        assert!((g.grad(x).unwrap().data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[0.0, 0.0]).with_requires_grad(true));
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
        g.backward(l).unwrap();
        let d = g.grad(x).unwrap();
        assert!((d.data()[0] + 0.5).abs() < 1e-15 && (d.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_nonfinite() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(g.cross_entropy(x, &[0]), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_consumes_graph() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]).with_requires_grad(true));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(g.backward(l).is_err());
    }

    #[test]
    fn taps_on_identity_and_independence() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[3.0, -1.0]));
        let y = g.scale(x, 1.0);
        let z = g.scale(x, 2.0);
        g.register_tap(y, TapId { layer: 0, slot: 0 }).unwrap();
        g.register_tap(z, TapId { layer: 0, slot: 1 }).unwrap();
        assert!(g.collect_taps().is_err());
        let s = g.add(y, z).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        let taps = g.collect_taps().unwrap();
        assert_eq!(taps.len(), 2);
        assert_eq!(taps[0].activation.data(), &[3.0, -1.0]);
        assert_eq!(taps[0].activation_grad.data(), &[1.0, 1.0]);
        assert_eq!(taps[1].activation.data(), &[6.0, -2.0]);
        assert_eq!(taps[1].tap_id.slot, 1);
    }

    #[test]
    fn softmax_axis_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn merge_rows_layout() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let f = g.constant(t(&[1, 2], &[9.0, 9.0]));
        let m = g.merge_rows(a, f, &[1], 3).unwrap();
        assert_eq!(g.value(m).data(), &[9.0, 9.0, 1.0, 2.0, 9.0, 9.0]);
    }
}
