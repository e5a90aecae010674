//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every forward operation appends a node to the [`Tape`]; nodes are stored in
//! creation order, which is a valid topological order because an operation can
//! only reference nodes that already exist. [`Tape::backward`] walks the nodes
//! in reverse exactly once and accumulates gradients into leaves.

use std::hash::{DefaultHasher, Hash, Hasher};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower bound applied inside every logarithm.
pub const LOG_CLAMP: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddN(Vec<Var>),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmaxRows(Var),
    LogClamped(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows { table: Var, ids: Vec<usize> },
    GroupMeanRows { x: Var, groups: Vec<Vec<usize>> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    Gather { x: Var, idx: Vec<usize> },
    LogSumExp(Var),
    SmoothL1 { x: Var, beta: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::AddN(xs) | Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::GatherRows { table, .. } => vec![*table],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::AddConst(x)
            | Op::Relu(x)
            | Op::LogSoftmaxRows(x)
            | Op::LogClamped(x)
            | Op::SumRows(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::LogSumExp(x)
            | Op::Softmax { x, .. }
            | Op::GroupMeanRows { x, .. }
            | Op::L2NormalizeRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Gather { x, .. }
            | Op::SmoothL1 { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
///
/// Leaves keep their gradients across calls to [`Tape::backward`]; call
/// [`Tape::zero_grad`] to reset them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Noted decisions, optionally attached to the node they shaped.
    decisions: Vec<(Option<Var>, Vec<u64>)>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// a[m×k] · b[n×k]ᵀ
fn matmul_t_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// a[k×m]ᵀ · b[k×n]
fn t_matmul_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, av) in arow.iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn logsumexp_slice(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    match t.shape().len() {
        1 => (1, t.shape()[0]),
        2 => (t.shape()[0], t.shape()[1]),
        _ => (t.rows(), t.numel() / t.rows().max(1)),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor as a leaf. It receives gradients iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Registers a constant (never receives gradients).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Records a non-differentiable decision (argmax, threshold mask) made from
    /// tape values, so [`Tape::branch_signature`] can detect when a perturbation
    /// changes it.
    pub fn note_decision<I: IntoIterator<Item = u64>>(&mut self, items: I) {
        self.decisions.push((None, items.into_iter().collect()));
    }

    /// Like [`Tape::note_decision`], attached to the node `v` built from the
    /// decision, so that it only enters signatures of `v` and its descendants.
    pub fn note_decision_on<I: IntoIterator<Item = u64>>(&mut self, v: Var, items: I) {
        self.decisions.push((Some(v), items.into_iter().collect()));
    }

    /// Hash of the branch bits of node `i`, or `None` for smooth ops.
    fn node_branches(&self, i: usize) -> Option<u64> {
        let node = &self.nodes[i];
        let bits: Box<dyn Iterator<Item = bool> + '_> = match &node.op {
            Op::Relu(x) => Box::new(self.value(*x).data().iter().map(|v| *v > 0.0)),
            Op::LogClamped(x) => Box::new(self.value(*x).data().iter().map(|v| *v > LOG_CLAMP)),
            Op::SmoothL1 { x, beta } => Box::new(self.value(*x).data().iter().map(move |v| v.abs() < *beta)),
            _ => return None,
        };
        let mut h = DefaultHasher::new();
        i.hash(&mut h);
        for b in bits {
            b.hash(&mut h);
        }
        Some(h.finish())
    }

    /// Hash of every piecewise branch taken on this tape: ReLU signs, smooth-L1
    /// regimes, log clamps, and noted decisions. Two evaluations with the same
    /// signature lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for i in 0..self.nodes.len() {
            self.node_branches(i).hash(&mut h);
        }
        self.decisions.hash(&mut h);
        h.finish()
    }

    /// [`Tape::branch_signature`] restricted to the subgraph `v` depends on:
    /// branches of its ancestors, decisions attached to them, and unattached
    /// decisions.
    pub fn branch_signature_of(&self, v: Var) -> u64 {
        self.branch_signatures_of(&[v])[0]
    }

    /// [`Tape::branch_signature_of`] for up to 64 nodes in one pass.
    pub fn branch_signatures_of(&self, vs: &[Var]) -> Vec<u64> {
        assert!(vs.len() <= 64, "at most 64 nodes per call");
        let end = vs.iter().map(|v| v.0 + 1).max().unwrap_or(0);
        let mut reach = vec![0u64; end];
        for (k, v) in vs.iter().enumerate() {
            reach[v.0] |= 1 << k;
        }
        for i in (0..end).rev() {
            if reach[i] != 0 {
                for p in self.nodes[i].op.inputs() {
                    reach[p.0] |= reach[i];
                }
            }
        }
        let mut hs: Vec<DefaultHasher> = vs.iter().map(|_| DefaultHasher::new()).collect();
        let each = |mask: u64, hs: &mut [DefaultHasher], f: &dyn Fn(&mut DefaultHasher)| {
            for (k, h) in hs.iter_mut().enumerate() {
                if mask >> k & 1 == 1 {
                    f(h);
                }
            }
        };
        for (i, &mask) in reach.iter().enumerate() {
            if mask != 0 {
                if let Some(b) = self.node_branches(i) {
                    each(mask, &mut hs, &|h| b.hash(h));
                }
            }
        }
        let all = if vs.len() == 64 { u64::MAX } else { (1u64 << vs.len()) - 1 };
        for d in &self.decisions {
            let mask = match d.0 {
                None => all,
                Some(a) if a.0 < end => reach[a.0],
                Some(_) => 0,
            };
            each(mask, &mut hs, &|h| d.hash(h));
        }
        hs.into_iter().map(|h| h.finish()).collect()
    }

    // ----- forward operations -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul of {:?} and {:?}: inner dimensions disagree",
                sa, sb
            )));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![sa[0], sb[1]], data)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Dimension(format!(
                "matmul_t of {:?} and {:?}: inner dimensions disagree",
                sa, sb
            )));
        }
        let data = matmul_t_raw(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[0]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![sa[0], sb[0]], data)?, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose expects a matrix, got {:?}", s)));
        }
        let data = transpose_raw(self.value(x).data(), s[0], s[1]);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![s[1], s[0]], data)?, Op::Transpose(x), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{}: shapes {:?} and {:?} differ",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Sum of same-shaped tensors. An empty list yields the scalar 0.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(first) = xs.first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let shape = self.shape(*first).to_vec();
        let mut data = vec![0.0; self.value(*first).numel()];
        for x in xs {
            if self.shape(*x) != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "add_n: shapes {:?} and {:?} differ",
                    shape,
                    self.shape(*x)
                )));
            }
            data.iter_mut()
                .zip(self.value(*x).data())
                .for_each(|(d, v)| *d += v);
        }
        let rg = xs.iter().any(|x| self.rg(*x));
        Ok(self.push(Tensor::new(shape, data)?, Op::AddN(xs.to_vec()), rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = as_matrix(self.value(x));
        if self.value(b).numel() != n {
            return Err(Error::Dimension(format!(
                "add_row: row vector {:?} does not match matrix {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bv = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            data[i * n..(i + 1) * n]
                .iter_mut()
                .zip(bv)
                .for_each(|(d, v)| *d += v);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|d| d * c).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|d| d + c).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::AddConst(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|d| d.max(0.0)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {} out of range for {:?}",
                axis, shape
            )));
        }
        let (outer, n, inner) = axis_layout(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; n];
        let mut res = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for k in 0..n {
                    buf[k] = src[(o * n + k) * inner + i];
                }
                softmax_slice(&buf, &mut res);
                for k in 0..n {
                    out[(o * n + k) * inner + i] = res[k];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let axis = self.shape(x).len().saturating_sub(1);
        self.softmax(x, axis)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (m, n) = as_matrix(v);
        let mut out = v.data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let lse = logsumexp_slice(row);
            row.iter_mut().for_each(|r| *r -= lse);
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::LogSoftmaxRows(x), rg)
    }

    /// Elementwise `ln(max(x, LOG_CLAMP))`.
    pub fn log_clamped(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|d| d.max(LOG_CLAMP).ln()).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::LogClamped(x), rg)
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = as_matrix(self.value(x));
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::Dimension(format!(
                "layer_norm: gain {:?} / bias {:?} do not match feature size {}",
                self.shape(gain),
                self.shape(bias),
                n
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; src.len()];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[i * n + j] = xh;
                out[i * n + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Embedding lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = as_matrix(self.value(table));
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::Dimension(format!(
                    "gather_rows: index {} out of range for {} rows",
                    id, m
                )));
            }
            data.extend_from_slice(&self.value(table).data()[id * n..(id + 1) * n]);
        }
        let t = Tensor::new(vec![ids.len(), n], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Output row `i` is the mean of the rows of `x` listed in `groups[i]`.
    pub fn group_mean_rows(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (m, n) = as_matrix(self.value(x));
        let src = self.value(x).data();
        let mut data = vec![0.0; groups.len() * n];
        for (gi, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Contract(format!("group_mean_rows: group {} is empty", gi)));
            }
            let w = 1.0 / g.len() as f64;
            for &r in g {
                if r >= m {
                    return Err(Error::Dimension(format!(
                        "group_mean_rows: row {} out of range for {} rows",
                        r, m
                    )));
                }
                for j in 0..n {
                    data[gi * n + j] += src[r * n + j] * w;
                }
            }
        }
        let t = Tensor::new(vec![groups.len(), n], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::GroupMeanRows {
                x,
                groups: groups.to_vec(),
            },
            rg,
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (m, n) = as_matrix(v);
        let mut out = v.data().to_vec();
        let mut norms = vec![0.0; m];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let nrm = row.iter().map(|r| r * r).sum::<f64>().sqrt().max(NORM_FLOOR);
            norms[i] = nrm;
            row.iter_mut().for_each(|r| *r /= nrm);
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::L2NormalizeRows { x, norms }, rg)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(first) = xs.first() else {
            return Err(Error::Contract("concat_cols of an empty list".into()));
        };
        let m = as_matrix(self.value(*first)).0;
        let mut widths = Vec::with_capacity(xs.len());
        for x in xs {
            let (r, c) = as_matrix(self.value(*x));
            if r != m {
                return Err(Error::Dimension(format!(
                    "concat_cols: {:?} and {:?} have different row counts",
                    self.shape(*first),
                    self.shape(*x)
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (x, w) in xs.iter().zip(&widths) {
            let src = self.value(*x).data();
            for i in 0..m {
                data[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = xs.iter().any(|x| self.rg(*x));
        Ok(self.push(Tensor::new(vec![m, total], data)?, Op::ConcatCols(xs.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(first) = xs.first() else {
            return Err(Error::Contract("concat_rows of an empty list".into()));
        };
        let n = as_matrix(self.value(*first)).1;
        let mut data = Vec::new();
        let mut m = 0;
        for x in xs {
            let (r, c) = as_matrix(self.value(*x));
            if c != n {
                return Err(Error::Dimension(format!(
                    "concat_rows: {:?} and {:?} have different widths",
                    self.shape(*first),
                    self.shape(*x)
                )));
            }
            m += r;
            data.extend_from_slice(self.value(*x).data());
        }
        let rg = xs.iter().any(|x| self.rg(*x));
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::ConcatRows(xs.to_vec()), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = as_matrix(self.value(x));
        if start >= end || end > n {
            return Err(Error::Dimension(format!(
                "slice_cols {}..{} invalid for {:?}",
                start,
                end,
                self.shape(x)
            )));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, w], data)?, Op::SliceCols { x, start }, rg))
    }

    /// Per-row sums: `m×n → [m]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (m, n) = as_matrix(v);
        let data = (0..m).map(|i| v.data()[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = self.rg(x);
        self.push(Tensor::vector(data), Op::SumRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.numel().max(1) as f64;
        let s = v.data().iter().sum::<f64>() / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Picks elements by flat row-major index into a 1-D tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= v.numel() {
                return Err(Error::Dimension(format!(
                    "gather: flat index {} out of range for {:?}",
                    i,
                    v.shape()
                )));
            }
            data.push(v.data()[i]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::vector(data),
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// `log Σ exp(x)` over every element.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::Contract("logsumexp over an empty tensor".into()));
        }
        let s = logsumexp_slice(v.data());
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::LogSumExp(x), rg))
    }

    /// Elementwise smooth-L1: `0.5 r²/β` when `|r| < β`, else `|r| − 0.5β`.
    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|r| smooth_l1(*r, beta)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::SmoothL1 { x, beta }, rg)
    }

    // ----- backward ------------------------------------------------------------

    /// Back-propagates from a scalar `loss`, accumulating `dloss/dleaf` into
    /// every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut res = Vec::with_capacity(2);
                if self.rg(*a) {
                    res.push((*a, matmul_t_raw(g, self.value(*b).data(), m, n, k)));
                }
                if self.rg(*b) {
                    res.push((*b, t_matmul_raw(self.value(*a).data(), g, m, k, n)));
                }
                res
            }
            Op::MatMulT(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let mut res = Vec::with_capacity(2);
                if self.rg(*a) {
                    res.push((*a, matmul_raw(g, self.value(*b).data(), m, n, k)));
                }
                if self.rg(*b) {
                    res.push((*b, t_matmul_raw(g, self.value(*a).data(), m, n, k)));
                }
                res
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                vec![(*x, transpose_raw(g, s[1], s[0]))]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()),
                    (*b, g.iter().zip(av).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::AddN(xs) => xs.iter().map(|x| (*x, g.to_vec())).collect(),
            Op::AddRow(x, b) => {
                let (m, n) = as_matrix(self.value(*x));
                let mut gb = vec![0.0; n];
                for r in 0..m {
                    gb.iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(a, v)| *a += v);
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::AddConst(x) => vec![(*x, g.to_vec())],
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                vec![(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_layout(node.value.shape(), *axis);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + ii;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * out[idx(k)]).sum();
                        for k in 0..n {
                            dx[idx(k)] = out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::LogSoftmaxRows(x) => {
                let (m, n) = as_matrix(&node.value);
                let mut dx = vec![0.0; g.len()];
                for r in 0..m {
                    let gs: f64 = g[r * n..(r + 1) * n].iter().sum();
                    for j in 0..n {
                        dx[r * n + j] = g[r * n + j] - out[r * n + j].exp() * gs;
                    }
                }
                vec![(*x, dx)]
            }
            Op::LogClamped(x) => {
                let xv = self.value(*x).data();
                vec![(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(gv, v)| if *v > LOG_CLAMP { gv / v } else { 0.0 })
                        .collect(),
                )]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = as_matrix(&node.value);
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let xr = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        let d = gr[j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xr[j];
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        let d = gr[j] * gv[j];
                        dx[r * n + j] = inv_std[r] * (d - mean_d - xr[j] * mean_dx);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::GatherRows { table, ids } => {
                let n = self.value(*table).cols();
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    dt[id * n..(id + 1) * n]
                        .iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(a, v)| *a += v);
                }
                vec![(*table, dt)]
            }
            Op::GroupMeanRows { x, groups } => {
                let n = node.value.cols();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (gi, grp) in groups.iter().enumerate() {
                    let w = 1.0 / grp.len() as f64;
                    for &r in grp {
                        for j in 0..n {
                            dx[r * n + j] += g[gi * n + j] * w;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::L2NormalizeRows { x, norms } => {
                let (m, n) = as_matrix(&node.value);
                let mut dx = vec![0.0; g.len()];
                for r in 0..m {
                    let y = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = (gr[j] - y[j] * dot) / norms[r];
                    }
                }
                vec![(*x, dx)]
            }
            Op::ConcatCols(xs) => {
                let (m, total) = as_matrix(&node.value);
                let mut off = 0;
                let mut res = Vec::with_capacity(xs.len());
                for x in xs {
                    let w = as_matrix(self.value(*x)).1;
                    let mut dx = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dx.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    off += w;
                    res.push((*x, dx));
                }
                res
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                xs.iter()
                    .map(|x| {
                        let len = self.value(*x).numel();
                        let dx = g[off..off + len].to_vec();
                        off += len;
                        (*x, dx)
                    })
                    .collect()
            }
            Op::SliceCols { x, start } => {
                let (m, n) = as_matrix(self.value(*x));
                let w = node.value.cols();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                vec![(*x, dx)]
            }
            Op::SumRows(x) => {
                let (m, n) = as_matrix(self.value(*x));
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n..(r + 1) * n].iter_mut().for_each(|d| *d = g[r]);
                }
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0] / n.max(1) as f64; n])]
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (k, &i) in idx.iter().enumerate() {
                    dx[i] += g[k];
                }
                vec![(*x, dx)]
            }
            Op::LogSumExp(x) => {
                let s = out[0];
                vec![(
                    *x,
                    self.value(*x)
                        .data()
                        .iter()
                        .map(|v| g[0] * (v - s).exp())
                        .collect(),
                )]
            }
            Op::SmoothL1 { x, beta } => {
                let xv = self.value(*x).data();
                vec![(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(gv, r)| {
                            if r.abs() < *beta {
                                gv * r / beta
                            } else {
                                gv * r.signum()
                            }
                        })
                        .collect(),
                )]
            }
        }
    }
}

/// Scalar smooth-L1 with transition point `beta`.
pub fn smooth_l1(r: f64, beta: f64) -> f64 {
    if r.abs() < beta {
        0.5 * r * r / beta
    } else {
        r.abs() - 0.5 * beta
    }
}
