//! Computation graph with reverse-mode differentiation.
//!
//! Nodes are appended as operations run, so insertion order is a valid
//! topological order and the graph is acyclic by construction. Each node
//! keeps its forward value plus whatever the backward rule needs.

use std::borrow::Cow;

use super::kernels::{self, gemm};
use super::{Array, ParamId, Result, Scalar, TensorError, MIN_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow { a: NodeId, bias: NodeId },
    Scale { a: NodeId, s: T },
    AddScalar(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Exp(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    L2Normalize { a: NodeId, inv_norms: Vec<T> },
    Inner(NodeId, NodeId),
    GatherRows { table: NodeId, ids: Vec<usize> },
    Pick { a: NodeId, cols: Vec<usize> },
    Sum(NodeId),
    Mean(NodeId),
    Minimum(NodeId, NodeId),
    Clamp { a: NodeId, lo: T, hi: T },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Array<T>, rstd: Vec<T> },
    CausalAttention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<T> },
    StackRows(Vec<NodeId>),
}

#[derive(Debug)]
struct Node<'p, T: Scalar> {
    value: Cow<'p, Array<T>>,
    op: Op<T>,
}

/// A single forward computation recorded for differentiation.
#[derive(Debug)]
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: [usize; 2], right: [usize; 2]) -> TensorError {
    TensorError::ShapeMismatch { op, left, right }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.value(id).item()
    }

    /// Input or constant owned by the graph.
    pub fn leaf(&mut self, value: Array<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Input borrowed from the caller.
    pub fn leaf_ref(&mut self, value: &'p Array<T>) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable parameter; gradients are reported under `id`.
    pub fn param(&mut self, id: ParamId, value: &'p Array<T>) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Param,
        });
        let node = NodeId(self.nodes.len() - 1);
        self.params.push((id, node));
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let out = kernels::matmul(self.value(a), false, self.value(b), false);
        Ok(self.push(out, Op::MatMul { a, b, trans_b: false }))
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[1] {
            return Err(mismatch("matmul_nt", sa, sb));
        }
        let out = kernels::matmul(self.value(a), false, self.value(b), true);
        Ok(self.push(out, Op::MatMul { a, b, trans_b: true }))
    }

    fn zip_values(&self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<Array<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_values("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_values("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_values("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_values("minimum", a, b, |x, y| if x <= y { x } else { y })?;
        Ok(self.push(out, Op::Minimum(a, b)))
    }

    /// Adds a `[1, n]` bias to every row.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb[0] != 1 || sb[1] != sa[1] {
            return Err(mismatch("add_row", sa, sb));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..out.rows() {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(&b) {
                *o = *o + bv;
            }
        }
        Ok(self.push(out, Op::AddRow { a, bias }))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let s = T::of(s);
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale { a, s })
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let s = T::of(s);
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(T::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(kernels::gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(T::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let out = self.value(a).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { a, lo, hi })
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = Array::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            kernels::softmax_row(x.row(i), out.row_mut(i));
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = Array::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            kernels::log_softmax_row(x.row(i), out.row_mut(i));
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Scales every row to unit L2 norm. Rows with norm below
    /// [`MIN_NORM`] are rejected.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_norms = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let norm = x.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm.as_f64() >= MIN_NORM) {
                return Err(TensorError::DegenerateNorm {
                    row: i,
                    norm: norm.as_f64(),
                });
            }
            let inv = T::one() / norm;
            for o in out.row_mut(i) {
                *o = *o * inv;
            }
            inv_norms.push(inv);
        }
        Ok(self.push(out, Op::L2Normalize { a, inv_norms }))
    }

    /// Frobenius inner product, `[1, 1]` result.
    pub fn inner(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("inner", va.shape(), vb.shape()));
        }
        let v = kernels::dot(va.data(), vb.data());
        Ok(self.push(Array::scalar(v), Op::Inner(a, b)))
    }

    /// Selects rows of `table` (embedding lookup or row slicing).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            if i >= t.rows() {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: t.rows(),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Array::new(ids.len(), t.cols(), data)?;
        Ok(self.push(out, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    /// `out[i] = a[i, cols[i]]`, shape `[rows, 1]`.
    pub fn pick(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let x = self.value(a);
        if cols.len() != x.rows() {
            return Err(mismatch("pick", x.shape(), [cols.len(), 1]));
        }
        let mut data = Vec::with_capacity(cols.len());
        for (i, &c) in cols.iter().enumerate() {
            if c >= x.cols() {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: c,
                    extent: x.cols(),
                });
            }
            data.push(x.get(i, c));
        }
        let out = Array::new(cols.len(), 1, data)?;
        Ok(self.push(out, Op::Pick { a, cols: cols.to_vec() }))
    }

    /// Per-row negative log-likelihood of `targets` given row log-probs.
    pub fn nll_rows(&mut self, log_probs: NodeId, targets: &[usize]) -> Result<NodeId> {
        let picked = self.pick(log_probs, targets)?;
        Ok(self.neg(picked))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum();
        self.push(Array::scalar(v), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let n = T::of(x.len().max(1) as f64);
        let v = x.sum() / n;
        self.push(Array::scalar(v), Op::Mean(a))
    }

    /// Layer normalization over each row with `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gain), self.shape(bias));
        if sg != [1, sx[1]] || sb != [1, sx[1]] {
            return Err(mismatch("layer_norm", sx, sg));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Array::zeros(sx[0], sx[1]);
        let mut out = Array::zeros(sx[0], sx[1]);
        let mut rstd = Vec::with_capacity(sx[0]);
        for i in 0..sx[0] {
            let (_, r) = kernels::layer_norm_row(xv.row(i), xhat.row_mut(i));
            rstd.push(r);
            let hr = xhat.row(i);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = hr[j] * g[j] + b[j];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Multi-head causal self-attention on already projected q, k, v.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq != sk || sq != sv {
            return Err(mismatch("causal_attention", sq, sk));
        }
        let [n, d] = sq;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!("{d} columns not divisible into {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = Array::zeros(n, d);
        let mut scores = vec![T::zero(); n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &qv.row(i)[off..off + dh];
                for j in 0..=i {
                    scores[j] = kernels::dot(qi, &kv.row(j)[off..off + dh]) * scale;
                }
                let p = &mut probs[(h * n + i) * n..(h * n + i) * n + i + 1];
                kernels::softmax_row(&scores[..=i], p);
                let orow = &mut out.row_mut(i)[off..off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vv.row(j)[off..off + dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o = *o + pj * x;
                    }
                }
            }
        }
        Ok(self.push(out, Op::CausalAttention { q, k, v, heads, probs }))
    }

    /// Concatenates nodes with equal column counts along rows.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts.first().map(|&p| self.shape(p)[1]).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(mismatch("stack_rows", [rows, cols], v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Array::new(rows, cols, data)?;
        Ok(self.push(out, Op::StackRows(parts.to_vec())))
    }

    /// Gradients of a scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(TensorError::NonScalarLoss { shape });
        }
        self.backward_seeded(vec![(loss, Array::scalar(T::one()))])
    }

    /// Backward pass from arbitrary output gradients (vector-Jacobian
    /// product). Seeds for the same node are summed.
    pub fn backward_seeded(&self, seeds: Vec<(NodeId, Array<T>)>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (id, g) in seeds {
            if g.shape() != self.shape(id) {
                return Err(mismatch("backward seed", self.shape(id), g.shape()));
            }
            start = start.max(id.0 + 1);
            accumulate(&mut grads, id, g);
        }
        for idx in (0..start).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn val(&self, id: NodeId) -> &Array<T> {
        &self.nodes[id.0].value
    }

    fn propagate(&self, idx: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let out = self.val(NodeId(idx));
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.val(*a), self.val(*b));
                {
                    let ga = slot(grads, *a, va);
                    // out = a b  -> da = g b^T ; out = a b^T -> da = g b
                    gemm(g, false, vb, !trans_b, T::one(), ga);
                }
                let gb = slot(grads, *b, vb);
                if *trans_b {
                    gemm(g, true, va, false, T::one(), gb);
                } else {
                    gemm(va, true, g, false, T::one(), gb);
                }
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g, T::one());
                add_into(grads, *b, g, T::one());
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g, T::one());
                add_into(grads, *b, g, -T::one());
            }
            Op::Mul(a, b) => {
                let da = zip(g, self.val(*b), |x, y| x * y);
                let db = zip(g, self.val(*a), |x, y| x * y);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let mut da = Array::zeros(g.rows(), g.cols());
                let mut db = Array::zeros(g.rows(), g.cols());
                for i in 0..g.len() {
                    if va.data()[i] <= vb.data()[i] {
                        da.data_mut()[i] = g.data()[i];
                    } else {
                        db.data_mut()[i] = g.data()[i];
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::AddRow { a, bias } => {
                add_into(grads, *a, g, T::one());
                let mut db = Array::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (d, &x) in db.data_mut().iter_mut().zip(g.row(i)) {
                        *d = *d + x;
                    }
                }
                accumulate(grads, *bias, db);
            }
            Op::Scale { a, s } => add_into(grads, *a, g, *s),
            Op::AddScalar(a) => add_into(grads, *a, g, T::one()),
            Op::Tanh(a) => {
                let da = zip(g, out, |gv, y| gv * (T::one() - y * y));
                accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let da = zip(g, self.val(*a), |gv, x| gv * kernels::gelu_grad(x));
                accumulate(grads, *a, da);
            }
            Op::Exp(a) => {
                let da = zip(g, out, |gv, y| gv * y);
                accumulate(grads, *a, da);
            }
            Op::Clamp { a, lo, hi } => {
                let da = zip(g, self.val(*a), |gv, x| if x >= *lo && x <= *hi { gv } else { T::zero() });
                accumulate(grads, *a, da);
            }
            Op::Softmax(a) => {
                let mut da = Array::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let (gr, yr) = (g.row(i), out.row(i));
                    let gy = kernels::dot(gr, yr);
                    for (j, d) in da.row_mut(i).iter_mut().enumerate() {
                        *d = yr[j] * (gr[j] - gy);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LogSoftmax(a) => {
                let mut da = Array::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let (gr, yr) = (g.row(i), out.row(i));
                    let gs: T = gr.iter().copied().sum();
                    for (j, d) in da.row_mut(i).iter_mut().enumerate() {
                        *d = gr[j] - yr[j].exp() * gs;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::L2Normalize { a, inv_norms } => {
                let mut da = Array::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let (gr, yr) = (g.row(i), out.row(i));
                    let gy = kernels::dot(gr, yr);
                    for (j, d) in da.row_mut(i).iter_mut().enumerate() {
                        *d = inv_norms[i] * (gr[j] - yr[j] * gy);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Inner(a, b) => {
                let s = g.item();
                add_into(grads, *a, self.val(*b), s);
                add_into(grads, *b, self.val(*a), s);
            }
            Op::GatherRows { table, ids } => {
                let t = self.val(*table);
                let gt = slot(grads, *table, t);
                for (r, &i) in ids.iter().enumerate() {
                    for (d, &x) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d = *d + x;
                    }
                }
            }
            Op::Pick { a, cols } => {
                let va = self.val(*a);
                let ga = slot(grads, *a, va);
                for (i, &c) in cols.iter().enumerate() {
                    let cur = ga.get(i, c);
                    ga.set(i, c, cur + g.data()[i]);
                }
            }
            Op::Sum(a) => {
                let va = self.val(*a);
                accumulate(grads, *a, Array::filled(va.rows(), va.cols(), g.item()));
            }
            Op::Mean(a) => {
                let va = self.val(*a);
                let s = g.item() / T::of(va.len().max(1) as f64);
                accumulate(grads, *a, Array::filled(va.rows(), va.cols(), s));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.val(*gain).data();
                let n = g.cols();
                let nf = T::of(n as f64);
                let mut dgain = Array::zeros(1, n);
                let mut dbias = Array::zeros(1, n);
                let mut dx = Array::zeros(g.rows(), n);
                let mut dxhat = vec![T::zero(); n];
                for i in 0..g.rows() {
                    let (gr, hr) = (g.row(i), xhat.row(i));
                    for j in 0..n {
                        dgain.data_mut()[j] = dgain.data()[j] + gr[j] * hr[j];
                        dbias.data_mut()[j] = dbias.data()[j] + gr[j];
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() / nf;
                    let m2 = kernels::dot(&dxhat, hr) / nf;
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = rstd[i] * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dgain);
                accumulate(grads, *bias, dbias);
            }
            Op::CausalAttention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
                let [n, d] = qv.shape();
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let mut dq = Array::zeros(n, d);
                let mut dk = Array::zeros(n, d);
                let mut dv = Array::zeros(n, d);
                let mut dp = vec![T::zero(); n];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let p = &probs[(h * n + i) * n..(h * n + i) * n + i + 1];
                        let go = &g.row(i)[off..off + dh];
                        let mut pdp = T::zero();
                        for j in 0..=i {
                            dp[j] = kernels::dot(go, &vv.row(j)[off..off + dh]);
                            pdp = pdp + p[j] * dp[j];
                            let dvj = &mut dv.row_mut(j)[off..off + dh];
                            for (dst, &x) in dvj.iter_mut().zip(go) {
                                *dst = *dst + p[j] * x;
                            }
                        }
                        let qi = &qv.row(i)[off..off + dh];
                        for j in 0..=i {
                            let ds = p[j] * (dp[j] - pdp) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let kj = &kv.row(j)[off..off + dh];
                            let dqi = &mut dq.row_mut(i)[off..off + dh];
                            for (dst, &x) in dqi.iter_mut().zip(kj) {
                                *dst = *dst + ds * x;
                            }
                            let dkj = &mut dk.row_mut(j)[off..off + dh];
                            for (dst, &x) in dkj.iter_mut().zip(qi) {
                                *dst = *dst + ds * x;
                            }
                        }
                    }
                }
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::StackRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let r = self.val(p).rows();
                    let c = g.cols();
                    let part = Array::new(r, c, g.data()[row * c..(row + r) * c].to_vec())
                        .expect("stack_rows slice");
                    accumulate(grads, p, part);
                    row += r;
                }
            }
        }
    }
}

fn zip<T: Scalar>(a: &Array<T>, b: &Array<T>, f: impl Fn(T, T) -> T) -> Array<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.rows(), a.cols(), data).expect("zip shapes")
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Array<T>>], id: NodeId, like: &Array<T>) -> &'a mut Array<T> {
    grads[id.0].get_or_insert_with(|| Array::zeros(like.rows(), like.cols()))
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array<T>>], id: NodeId, g: Array<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        empty @ None => *empty = Some(g),
    }
}

fn add_into<T: Scalar>(grads: &mut [Option<Array<T>>], id: NodeId, g: &Array<T>, s: T) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, &x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + s * x;
            }
        }
        empty @ None => *empty = Some(if s == T::one() { g.clone() } else { g.map(|x| x * s) }),
    }
}

/// Result of a backward pass: gradients for leaves and parameters.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf or parameter node; `None` if it did not
    /// influence the seeded outputs.
    pub fn grad(&self, node: NodeId) -> Option<&Array<T>> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    /// Leaf gradient or zeros shaped like the leaf.
    pub fn grad_or_zeros(&self, node: NodeId, shape: [usize; 2]) -> Array<T> {
        self.grad(node).cloned().unwrap_or_else(|| Array::zeros(shape[0], shape[1]))
    }

    /// Adds parameter gradients into `acc` (indexed by [`ParamId`]).
    /// Untouched parameters contribute zero.
    pub fn accumulate_params(&self, acc: &mut [Array<T>]) {
        for &(pid, node) in &self.params {
            if let Some(g) = self.grad(node) {
                acc[pid.0].add_assign(g);
            }
        }
    }

    /// Dense parameter gradients shaped like `like`.
    pub fn param_grads(&self, like: &super::ParamStore<T>) -> Vec<Array<T>> {
        let mut acc = like.zeros_like();
        self.accumulate_params(&mut acc);
        acc
    }
}
