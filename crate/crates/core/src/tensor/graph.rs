//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep that
//! visits each node once. Graphs are built fresh for every forward pass.

use super::Tensor;
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
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
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    GatherRows { table: Var, idx: Vec<Option<usize>> },
    Reshape(Var),
    CausalAttention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64>, mask: Option<Tensor> },
    FoPool { f: Var, z: Var, c0: Option<Var>, batch: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    MeanSquare(Var),
    Mean(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// The gradient, or zeros of the node's shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, g: &Graph) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// `out (+)= op(a) * op(b)` with `op` an optional transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_shape: (usize, usize),
    ta: bool,
    b: &[f64],
    b_shape: (usize, usize),
    tb: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    let (m, k) = if ta { (a_shape.1, a_shape.0) } else { a_shape };
    let n = if tb { b_shape.0 } else { b_shape.1 };
    let (rsa, csa) = if ta { (1, a_shape.1 as isize) } else { (a_shape.1 as isize, 1) };
    let (rsb, csb) = if tb { (1, b_shape.1 as isize) } else { (b_shape.1 as isize, 1) };
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover m*k, k*n and m*n elements with the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise log-softmax of a plain tensor (no graph).
pub fn log_softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let c = t.cols();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

fn add_into(slot: &mut Option<Tensor>, g: &[f64], shape: &[usize]) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        None => {
            *slot = Some(Tensor::new(shape, g.to_vec()).expect("gradient shape"));
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// A leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(name, value, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (sa, sb) = (dims2(va), dims2(vb));
        let (m, ka) = if ta { (sa.1, sa.0) } else { sa };
        let (kb, n) = if tb { (sb.1, sb.0) } else { sb };
        if ka != kb {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(va.data(), sa, ta, vb.data(), sb, tb, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[cols]` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        let c = va.cols();
        if vb.len() != c {
            return Err(Error::shape("add_row", va.shape(), vb.shape()));
        }
        let mut value = va.clone();
        for row in value.data_mut().chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        self.push("add_row", value, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, s), |x| x * s)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, Op::Gelu(a), gelu)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        let c = value.cols();
        for row in value.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push("softmax", value, Op::SoftmaxRows(a), &[a])
    }

    /// Normalises each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both `[cols]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", vx.shape(), self.value(gain).shape()));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows || self.value(*p).shape().len() != 2 {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), self.value(*p).shape()));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::new(&[rows, total], out)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start + width` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let va = self.value(a);
        let (rows, c) = dims2(va);
        if start + width > c {
            return Err(Error::shape("slice_cols", va.shape(), &[start, width]));
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&va.row(r)[start..start + width]);
        }
        let value = Tensor::new(&[rows, width], out)?;
        self.push("slice_cols", value, Op::SliceCols { a, start }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), v.shape()));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let value = Tensor::new(&[rows, cols], out)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..start + count`.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let va = self.value(a);
        let c = va.cols();
        if start + count > va.rows() {
            return Err(Error::shape("slice_rows", va.shape(), &[start, count]));
        }
        let value = Tensor::new(&[count, c], va.data()[start * c..(start + count) * c].to_vec())?;
        self.push("slice_rows", value, Op::SliceRows { a, start }, &[a])
    }

    /// Row gather; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, idx: &[Option<usize>]) -> Result<Var> {
        let vt = self.value(table);
        let (rows, c) = dims2(vt);
        let mut out = Vec::with_capacity(idx.len() * c);
        for i in idx {
            match i {
                Some(i) if *i < rows => out.extend_from_slice(vt.row(*i)),
                Some(i) => return Err(Error::Index(format!("row {i} out of range for {rows} rows"))),
                None => out.extend(std::iter::repeat_n(0.0, c)),
            }
        }
        let value = Tensor::new(&[idx.len(), c], out)?;
        self.push("gather_rows", value, Op::GatherRows { table, idx: idx.to_vec() }, &[table])
    }

    /// Embedding lookup: one row of `table` per id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let idx: Vec<Option<usize>> = ids.iter().map(|&i| Some(i as usize)).collect();
        self.gather_rows(table, &idx)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Multi-head causal self-attention over packed `[batch * seq, 3 * d]`
    /// query/key/value rows (batch-major). Scores are scaled by
    /// `1 / sqrt(d / heads)`. `mask`, if given, multiplies the attention
    /// probabilities and has `batch * heads * seq * seq` entries.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        mask: Option<Tensor>,
    ) -> Result<Var> {
        let v = self.value(qkv);
        let (rows, c3) = dims2(v);
        if rows != batch * seq || c3 % 3 != 0 || (c3 / 3) % heads != 0 {
            return Err(Error::shape("causal_attention", v.shape(), &[batch, seq, heads]));
        }
        if let Some(m) = &mask {
            if m.len() != batch * heads * seq * seq {
                return Err(Error::shape("causal_attention mask", m.shape(), &[batch, heads, seq, seq]));
            }
        }
        let d = c3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let data = v.data();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let q = &data[(b * seq + i) * c3 + h * dh..][..dh];
                    let p = &mut probs[base + i * seq..base + (i + 1) * seq];
                    for j in 0..=i {
                        let k = &data[(b * seq + j) * c3 + d + h * dh..][..dh];
                        p[j] = q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    softmax_in_place(&mut p[..=i]);
                    let o = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        let w = match &mask {
                            Some(m) => p[j] * m.data()[base + i * seq + j],
                            None => p[j],
                        };
                        let vv = &data[(b * seq + j) * c3 + 2 * d + h * dh..][..dh];
                        for (o, x) in o.iter_mut().zip(vv) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[rows, d], out)?;
        self.push(
            "causal_attention",
            value,
            Op::CausalAttention { qkv, batch, seq, heads, probs, mask },
            &[qkv],
        )
    }

    /// Attention probabilities saved by a [`causal_attention`](Self::causal_attention)
    /// node, laid out `[batch, heads, seq, seq]` (before any dropout mask).
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::CausalAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// fo-pooling over time-major rows (`t * batch + b`):
    /// `c_t = f_t * c_{t-1} + (1 - f_t) * z_t`, starting from `c0` (zeros if
    /// absent). Returns every `c_t`.
    pub fn fo_pool(&mut self, f: Var, z: Var, c0: Option<Var>, batch: usize) -> Result<Var> {
        self.same_shape("fo_pool", f, z)?;
        let (rows, h) = dims2(self.value(f));
        if batch == 0 || rows % batch != 0 {
            return Err(Error::shape("fo_pool", self.value(f).shape(), &[batch]));
        }
        if let Some(c0) = c0 {
            if self.value(c0).shape() != [batch, h] {
                return Err(Error::shape("fo_pool c0", self.value(c0).shape(), &[batch, h]));
            }
        }
        let width = batch * h;
        let mut out = vec![0.0; rows * h];
        let mut prev = match c0 {
            Some(c0) => self.value(c0).data().to_vec(),
            None => vec![0.0; width],
        };
        let (fd, zd) = (self.value(f).data(), self.value(z).data());
        for t in 0..rows / batch {
            let off = t * width;
            for i in 0..width {
                let ft = fd[off + i];
                prev[i] = ft * prev[i] + (1.0 - ft) * zd[off + i];
                out[off + i] = prev[i];
            }
        }
        let value = Tensor::new(&[rows, h], out)?;
        let parents: Vec<Var> = [Some(f), Some(z), c0].into_iter().flatten().collect();
        self.push("fo_pool", value, Op::FoPool { f, z, c0, batch }, &parents)
    }

    /// Weighted mean of `-ln softmax(logits)[target]` over rows, in nats.
    /// `weights` defaults to all ones; rows with weight zero are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, v) = dims2(vl);
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", vl.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target {bad} out of range for {v} classes")));
        }
        let weights = match weights {
            Some(w) if w.len() != rows => return Err(Error::shape("cross_entropy weights", vl.shape(), &[w.len()])),
            Some(w) => w.to_vec(),
            None => vec![1.0; rows],
        };
        let total_w: f64 = weights.iter().sum();
        if total_w <= 0.0 {
            return Err(Error::Usage("cross_entropy with zero total weight".into()));
        }
        let mut probs = vl.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(v).enumerate() {
            softmax_in_place(row);
            if weights[r] != 0.0 {
                let lp = logsumexp_target(vl.row(r), targets[r]);
                loss -= weights[r] * lp;
            }
        }
        let value = Tensor::scalar(loss / total_w);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights, probs },
            &[logits],
        )
    }

    pub fn mean_square(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let value = Tensor::scalar(va.sum_squares() / va.len() as f64);
        self.push("mean_square", value, Op::MeanSquare(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).mean());
        self.push("mean", value, Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage("loss variable does not belong to this graph".into()))?;
        if node.value.len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar, got shape {:?}", node.value.shape())));
        }
        if !node.needs_grad || matches!(node.op, Op::Leaf) {
            return Err(Error::Usage("backward on a value with no recorded graph".into()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::new(node.value.shape(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (dims2(va), dims2(vb));
                let sg = dims2(out);
                if self.wants(*a) {
                    let mut da = vec![0.0; va.len()];
                    if *ta {
                        // dA = op(B) * G^T
                        gemm(vb.data(), sb, *tb, gd, sg, true, &mut da, false);
                    } else {
                        // dA = G * op(B)^T
                        gemm(gd, sg, false, vb.data(), sb, !*tb, &mut da, false);
                    }
                    add_into(&mut grads[a.0], &da, va.shape());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; vb.len()];
                    if *tb {
                        // dB = G^T * op(A)
                        gemm(gd, sg, true, va.data(), sa, *ta, &mut db, false);
                    } else {
                        // dB = op(A)^T * G
                        gemm(va.data(), sa, !*ta, gd, sg, false, &mut db, false);
                    }
                    add_into(&mut grads[b.0], &db, vb.shape());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gd, out.shape());
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], gd, out.shape());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gd, out.shape());
                }
                if self.wants(*b) {
                    let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &neg, out.shape());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d: Vec<f64> = gd.iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    add_into(&mut grads[a.0], &d, out.shape());
                }
                if self.wants(*b) {
                    let d: Vec<f64> = gd.iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    add_into(&mut grads[b.0], &d, out.shape());
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gd, out.shape());
                }
                if self.wants(*bias) {
                    let c = out.cols();
                    let mut db = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    add_into(&mut grads[bias.0], &db, self.value(*bias).shape());
                }
            }
            Op::Scale(a, s) => {
                let d: Vec<f64> = gd.iter().map(|g| g * s).collect();
                add_into(&mut grads[a.0], &d, out.shape());
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                add_into(&mut grads[a.0], &d, out.shape());
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = gd.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                add_into(&mut grads[a.0], &d, out.shape());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d: Vec<f64> = gd.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                add_into(&mut grads[a.0], &d, out.shape());
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d: Vec<f64> = gd.iter().zip(x).map(|(g, x)| g * gelu_grad(*x)).collect();
                add_into(&mut grads[a.0], &d, out.shape());
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(out.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                add_into(&mut grads[a.0], &d, out.shape());
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = out.cols();
                let gv = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (grow, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * hrow[j];
                            db[j] += grow[j];
                        }
                    }
                    if self.wants(*gain) {
                        add_into(&mut grads[gain.0], &dg, self.value(*gain).shape());
                    }
                    if self.wants(*bias) {
                        add_into(&mut grads[bias.0], &db, self.value(*bias).shape());
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; out.len()];
                    for (r, ((drow, grow), hrow)) in dx.chunks_mut(c).zip(gd.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(g, w)| g * w).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            drow[j] = inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                    add_into(&mut grads[x.0], &dx, out.shape());
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for p in parts {
                    let vp = self.value(*p);
                    let w = vp.cols();
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(vp.len());
                        for row in gd.chunks(total) {
                            d.extend_from_slice(&row[off..off + w]);
                        }
                        add_into(&mut grads[p.0], &d, vp.shape());
                    }
                    off += w;
                }
            }
            Op::SliceCols { a, start } => {
                let va = self.value(*a);
                let (c, w) = (va.cols(), out.cols());
                let mut d = vec![0.0; va.len()];
                for (drow, grow) in d.chunks_mut(c).zip(gd.chunks(w)) {
                    drow[*start..start + w].copy_from_slice(grow);
                }
                add_into(&mut grads[a.0], &d, va.shape());
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let vp = self.value(*p);
                    if self.wants(*p) {
                        add_into(&mut grads[p.0], &gd[off..off + vp.len()], vp.shape());
                    }
                    off += vp.len();
                }
            }
            Op::SliceRows { a, start } => {
                let va = self.value(*a);
                let c = va.cols();
                let mut d = vec![0.0; va.len()];
                d[start * c..start * c + gd.len()].copy_from_slice(gd);
                add_into(&mut grads[a.0], &d, va.shape());
            }
            Op::GatherRows { table, idx } => {
                let vt = self.value(*table);
                let c = vt.cols();
                let slot = grads[table.0].get_or_insert_with(|| Tensor::zeros(vt.shape()));
                let dd = slot.data_mut();
                for (row, i) in gd.chunks(c).zip(idx) {
                    if let Some(i) = i {
                        for (d, x) in dd[i * c..(i + 1) * c].iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                add_into(&mut grads[a.0], gd, self.value(*a).shape());
            }
            Op::CausalAttention { qkv, batch, seq, heads, probs, mask } => {
                let v = self.value(*qkv);
                let c3 = v.cols();
                let d = c3 / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let data = v.data();
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let mut dqkv = vec![0.0; v.len()];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let go = &gd[(b * seq + i) * d + h * dh..][..dh];
                            let p = &probs[base + i * seq..base + i * seq + i + 1];
                            // dP (through the mask) and dV
                            for j in 0..=i {
                                let m = mask.as_ref().map_or(1.0, |m| m.data()[base + i * seq + j]);
                                let vrow = (b * seq + j) * c3 + 2 * d + h * dh;
                                let mut acc = 0.0;
                                for t in 0..dh {
                                    acc += go[t] * data[vrow + t];
                                    dqkv[vrow + t] += p[j] * m * go[t];
                                }
                                dp[j] = acc * m;
                            }
                            let dot: f64 = (0..=i).map(|j| dp[j] * p[j]).sum();
                            let qrow = (b * seq + i) * c3 + h * dh;
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = (b * seq + j) * c3 + d + h * dh;
                                for t in 0..dh {
                                    dqkv[qrow + t] += ds * data[krow + t];
                                    dqkv[krow + t] += ds * data[qrow + t];
                                }
                            }
                        }
                    }
                }
                add_into(&mut grads[qkv.0], &dqkv, v.shape());
            }
            Op::FoPool { f, z, c0, batch } => {
                let (fd, zd) = (self.value(*f).data(), self.value(*z).data());
                let c = out.data();
                let width = batch * out.cols();
                let steps = out.len() / width;
                let c0v: Vec<f64> = match c0 {
                    Some(c0) => self.value(*c0).data().to_vec(),
                    None => vec![0.0; width],
                };
                let mut df = vec![0.0; out.len()];
                let mut dz = vec![0.0; out.len()];
                let mut carry = vec![0.0; width];
                for t in (0..steps).rev() {
                    let off = t * width;
                    for i in 0..width {
                        let dc = gd[off + i] + carry[i];
                        let prev = if t == 0 { c0v[i] } else { c[off - width + i] };
                        let ft = fd[off + i];
                        df[off + i] = dc * (prev - zd[off + i]);
                        dz[off + i] = dc * (1.0 - ft);
                        carry[i] = dc * ft;
                    }
                }
                if self.wants(*f) {
                    add_into(&mut grads[f.0], &df, out.shape());
                }
                if self.wants(*z) {
                    add_into(&mut grads[z.0], &dz, out.shape());
                }
                if let Some(c0) = c0 {
                    if self.wants(*c0) {
                        add_into(&mut grads[c0.0], &carry, self.value(*c0).shape());
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let vl = self.value(*logits);
                let v = vl.cols();
                let total_w: f64 = weights.iter().sum();
                let mut d = probs.clone();
                for (r, row) in d.chunks_mut(v).enumerate() {
                    let w = weights[r] / total_w * gd[0];
                    for x in row.iter_mut() {
                        *x *= w;
                    }
                    row[targets[r]] -= w;
                }
                add_into(&mut grads[logits.0], &d, vl.shape());
            }
            Op::MeanSquare(a) => {
                let va = self.value(*a);
                let k = 2.0 * gd[0] / va.len() as f64;
                let d: Vec<f64> = va.data().iter().map(|x| k * x).collect();
                add_into(&mut grads[a.0], &d, va.shape());
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let d = vec![gd[0] / va.len() as f64; va.len()];
                add_into(&mut grads[a.0], &d, va.shape());
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                add_into(&mut grads[a.0], &vec![gd[0]; va.len()], va.shape());
            }
        }
    }
}

fn logsumexp_target(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}
