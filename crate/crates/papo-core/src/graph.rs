//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is a write-once tape: each op appends a node holding its
//! forward value, and [`Graph::backward`] walks the tape in reverse
//! accumulating adjoints. Parameters enter as leaves per step and gradients
//! are read back out, so generated weights (hypernetwork outputs) are
//! ordinary interior nodes and gradients flow through them to the generator.
//!
//! Matmul kernels parallelize over disjoint output regions; every output
//! element is reduced in a fixed sequential order, so results are bitwise
//! identical regardless of thread count.

use crate::tensor::Tensor;
use rayon::prelude::*;
use std::sync::Arc;

/// Floor applied inside `log`; keeps impossible-state paths finite.
pub const LOG_FLOOR: f64 = 1e-12;

/// Work threshold (multiply-adds) below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 18;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Clip(NodeId, f64, f64),
    Min(NodeId, NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Pick(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    ConcatCols(NodeId, NodeId),
    Reshape(NodeId),
    RepeatRow(NodeId),
    SliceRows(NodeId, usize),
}

struct Node {
    rows: usize,
    cols: usize,
    data: Arc<Vec<f64>>,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(debug_assertions)]
fn debug_check_finite(what: &str, data: &[f64]) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "non-finite value produced by {what}"
    );
}

#[cfg(not(debug_assertions))]
fn debug_check_finite(_what: &str, _data: &[f64]) {}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            rows,
            cols,
            data: Arc::new(data),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.0].rows
    }

    pub fn cols(&self, id: NodeId) -> usize {
        self.nodes[id.0].cols
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        assert_eq!(self.nodes[id.0].data.len(), 1, "node is not a scalar");
        self.nodes[id.0].data[0]
    }

    /// Insert a parameter (or constant input) leaf. Shares the tensor's
    /// backing storage; no copy.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.nodes.push(Node {
            rows: t.rows(),
            cols: t.cols(),
            data: t.shared(),
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        mat_mul(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n, false);
        debug_check_finite("matmul", &out);
        self.push(m, n, out, Op::MatMul(a, b))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> (usize, usize) {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!(
            (r, c),
            (self.rows(b), self.cols(b)),
            "{what}: shape mismatch"
        );
        (r, c)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.same_shape(a, b, "add");
        let out = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        self.push(r, c, out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.same_shape(a, b, "sub");
        let out = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x - y);
        self.push(r, c, out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.same_shape(a, b, "mul");
        let out = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        debug_check_finite("mul", &out);
        self.push(r, c, out, Op::Mul(a, b))
    }

    /// `[m, n] + [1, n]`, broadcasting the row across all rows of `a`.
    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (m, n) = (self.rows(a), self.cols(a));
        assert_eq!((self.rows(v), self.cols(v)), (1, n), "add_row: bad row shape");
        let row = &self.nodes[v.0].data;
        let mut out = self.nodes[a.0].data.as_ref().clone();
        for chunk in out.chunks_mut(n) {
            for (o, r) in chunk.iter_mut().zip(row.iter()) {
                *o += *r;
            }
        }
        self.push(m, n, out, Op::AddRow(a, v))
    }

    /// `[m, n] ⊙ [1, n]`, broadcasting the row across all rows of `a`.
    pub fn mul_row(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (m, n) = (self.rows(a), self.cols(a));
        assert_eq!((self.rows(v), self.cols(v)), (1, n), "mul_row: bad row shape");
        let row = &self.nodes[v.0].data;
        let mut out = self.nodes[a.0].data.as_ref().clone();
        for chunk in out.chunks_mut(n) {
            for (o, r) in chunk.iter_mut().zip(row.iter()) {
                *o *= *r;
            }
        }
        debug_check_finite("mul_row", &out);
        self.push(m, n, out, Op::MulRow(a, v))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let (r, cl) = (self.rows(a), self.cols(a));
        let out = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        self.push(r, cl, out, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (r, cl) = (self.rows(a), self.cols(a));
        let out = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        self.push(r, cl, out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        let out = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        self.push(r, c, out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        let out = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        self.push(r, c, out, Op::Exp(a))
    }

    /// Elementwise `ln(max(x, LOG_FLOOR))`; the floor keeps zero inputs finite
    /// and zeroes their gradient.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        let out = self
            .nodes[a.0]
            .data
            .iter()
            .map(|x| x.max(LOG_FLOOR).ln())
            .collect();
        self.push(r, c, out, Op::Log(a))
    }

    /// Clip to `[lo, hi]`; gradient passes through on the closed interval and
    /// is zero outside (interior-side subgradient at the boundary).
    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo <= hi);
        let (r, c) = (self.rows(a), self.cols(a));
        let out = self.nodes[a.0].data.iter().map(|x| x.clamp(lo, hi)).collect();
        self.push(r, c, out, Op::Clip(a, lo, hi))
    }

    /// Elementwise minimum; ties send the gradient to the first argument.
    pub fn min2(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.same_shape(a, b, "min2");
        let out = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| {
            if x <= y {
                x
            } else {
                y
            }
        });
        self.push(r, c, out, Op::Min(a, b))
    }

    /// Row-wise softmax (max-subtracted).
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (m, n) = (self.rows(a), self.cols(a));
        let mut out = vec![0.0; m * n];
        for (orow, arow) in out.chunks_mut(n).zip(self.nodes[a.0].data.chunks(n)) {
            let mx = arow.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for (o, &x) in orow.iter_mut().zip(arow.iter()) {
                *o = (x - mx).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        debug_check_finite("softmax", &out);
        self.push(m, n, out, Op::Softmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let (m, n) = (self.rows(a), self.cols(a));
        let mut out = vec![0.0; m * n];
        for (orow, arow) in out.chunks_mut(n).zip(self.nodes[a.0].data.chunks(n)) {
            let mx = arow.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = arow.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
            for (o, &x) in orow.iter_mut().zip(arow.iter()) {
                *o = x - lse;
            }
        }
        debug_check_finite("log_softmax", &out);
        self.push(m, n, out, Op::LogSoftmax(a))
    }

    /// Select one column per row: `out[i, 0] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let (m, n) = (self.rows(a), self.cols(a));
        assert_eq!(idx.len(), m, "pick: one index per row");
        assert!(idx.iter().all(|&j| j < n), "pick: index out of range");
        let data = &self.nodes[a.0].data;
        let out = idx.iter().enumerate().map(|(i, &j)| data[i * n + j]).collect();
        self.push(m, 1, out, Op::Pick(a, idx.to_vec()))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].data.iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let len = self.nodes[a.0].data.len().max(1);
        let s = self.nodes[a.0].data.iter().sum::<f64>() / len as f64;
        self.push(1, 1, vec![s], Op::Mean(a))
    }

    /// Horizontal concatenation `[m, p] ⊕ [m, q] -> [m, p + q]`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, p) = (self.rows(a), self.cols(a));
        let (m2, q) = (self.rows(b), self.cols(b));
        assert_eq!(m, m2, "concat_cols: row counts differ");
        let mut out = Vec::with_capacity(m * (p + q));
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for i in 0..m {
            out.extend_from_slice(&da[i * p..(i + 1) * p]);
            out.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        self.push(m, p + q, out, Op::ConcatCols(a, b))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        assert_eq!(
            rows * cols,
            self.nodes[a.0].data.len(),
            "reshape: element count mismatch"
        );
        let data = self.nodes[a.0].data.as_ref().clone();
        self.push(rows, cols, data, Op::Reshape(a))
    }

    /// Rows `[r0, r1)` of a matrix as a new `[r1 - r0, n]` node.
    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> NodeId {
        let (m, n) = (self.rows(a), self.cols(a));
        assert!(r0 < r1 && r1 <= m, "slice_rows: bad range {r0}..{r1} of {m}");
        let data = self.nodes[a.0].data[r0 * n..r1 * n].to_vec();
        self.push(r1 - r0, n, data, Op::SliceRows(a, r0))
    }

    /// Broadcast a `[1, n]` row to `[m, n]`.
    pub fn repeat_row(&mut self, v: NodeId, m: usize) -> NodeId {
        assert_eq!(self.rows(v), 1, "repeat_row wants a row vector");
        let n = self.cols(v);
        let row = &self.nodes[v.0].data;
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(row);
        }
        self.push(m, n, out, Op::RepeatRow(v))
    }

    /// Reverse pass from a scalar node; returns per-node adjoints.
    pub fn backward(&mut self, loss: NodeId) -> Gradients {
        assert_eq!(
            (self.rows(loss), self.cols(loss)),
            (1, 1),
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-stash for later reads before distributing to inputs.
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let n = node.cols;
                    {
                        // dA = G · Bᵀ
                        let da = ensure(&mut grads, a.0, m * k);
                        mat_mul_bt(&g, &self.nodes[b.0].data, da, m, n, k);
                    }
                    // dB = Aᵀ · G
                    let db = ensure(&mut grads, b.0, k * n);
                    mat_mul_at(&self.nodes[a.0].data, &g, db, m, k, n);
                }
                Op::Add(a, b) => {
                    axpy_into(&mut grads, a.0, &g, 1.0);
                    axpy_into(&mut grads, b.0, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    axpy_into(&mut grads, a.0, &g, 1.0);
                    axpy_into(&mut grads, b.0, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = zip_map(&g, &self.nodes[b.0].data, |gi, bv| gi * bv);
                    let db: Vec<f64> = zip_map(&g, &self.nodes[a.0].data, |gi, av| gi * av);
                    add_vec(&mut grads, a.0, da);
                    add_vec(&mut grads, b.0, db);
                }
                Op::AddRow(a, v) => {
                    let n = node.cols;
                    axpy_into(&mut grads, a.0, &g, 1.0);
                    let dv = ensure(&mut grads, v.0, n);
                    for chunk in g.chunks(n) {
                        for (d, gi) in dv.iter_mut().zip(chunk.iter()) {
                            *d += *gi;
                        }
                    }
                }
                Op::MulRow(a, v) => {
                    let n = node.cols;
                    let row = self.nodes[v.0].data.clone();
                    let avals = self.nodes[a.0].data.clone();
                    {
                        let da = ensure(&mut grads, a.0, g.len());
                        for (dchunk, gchunk) in da.chunks_mut(n).zip(g.chunks(n)) {
                            for ((d, gi), r) in dchunk.iter_mut().zip(gchunk.iter()).zip(row.iter())
                            {
                                *d += gi * r;
                            }
                        }
                    }
                    let dv = ensure(&mut grads, v.0, n);
                    for (gchunk, achunk) in g.chunks(n).zip(avals.chunks(n)) {
                        for ((d, gi), av) in dv.iter_mut().zip(gchunk.iter()).zip(achunk.iter()) {
                            *d += gi * av;
                        }
                    }
                }
                Op::AddScalar(a) => axpy_into(&mut grads, a.0, &g, 1.0),
                Op::Scale(a, c) => axpy_into(&mut grads, a.0, &g, *c),
                Op::Relu(a) => {
                    let da: Vec<f64> =
                        zip_map(&g, &self.nodes[a.0].data, |gi, x| if x > 0.0 { gi } else { 0.0 });
                    add_vec(&mut grads, a.0, da);
                }
                Op::Exp(a) => {
                    let da: Vec<f64> = zip_map(&g, &node.data.clone(), |gi, y| gi * y);
                    add_vec(&mut grads, a.0, da);
                }
                Op::Log(a) => {
                    let da: Vec<f64> = zip_map(&g, &self.nodes[a.0].data, |gi, x| {
                        if x > LOG_FLOOR {
                            gi / x
                        } else {
                            0.0
                        }
                    });
                    add_vec(&mut grads, a.0, da);
                }
                Op::Clip(a, lo, hi) => {
                    let da: Vec<f64> = zip_map(&g, &self.nodes[a.0].data, |gi, x| {
                        if x >= *lo && x <= *hi {
                            gi
                        } else {
                            0.0
                        }
                    });
                    add_vec(&mut grads, a.0, da);
                }
                Op::Min(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                    let mut da = vec![0.0; g.len()];
                    let mut db = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        if va[i] <= vb[i] {
                            da[i] = g[i];
                        } else {
                            db[i] = g[i];
                        }
                    }
                    add_vec(&mut grads, a.0, da);
                    add_vec(&mut grads, b.0, db);
                }
                Op::Softmax(a) => {
                    let n = node.cols;
                    let y = node.data.clone();
                    let mut da = vec![0.0; g.len()];
                    for ((drow, grow), yrow) in
                        da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(gi, yi)| gi * yi).sum();
                        for ((d, gi), yi) in drow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                            *d = yi * (gi - dot);
                        }
                    }
                    add_vec(&mut grads, a.0, da);
                }
                Op::LogSoftmax(a) => {
                    let n = node.cols;
                    let y = node.data.clone();
                    let mut da = vec![0.0; g.len()];
                    for ((drow, grow), yrow) in
                        da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for ((d, gi), yi) in drow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                            *d = gi - yi.exp() * gsum;
                        }
                    }
                    add_vec(&mut grads, a.0, da);
                }
                Op::Pick(a, idx) => {
                    let n = self.nodes[a.0].cols;
                    let idx = idx.clone();
                    let da = ensure(&mut grads, a.0, self.nodes[a.0].data.len());
                    for (i, &j) in idx.iter().enumerate() {
                        da[i * n + j] += g[i];
                    }
                }
                Op::Sum(a) => {
                    let da = vec![g[0]; self.nodes[a.0].data.len()];
                    add_vec(&mut grads, a.0, da);
                }
                Op::Mean(a) => {
                    let len = self.nodes[a.0].data.len().max(1);
                    let da = vec![g[0] / len as f64; self.nodes[a.0].data.len()];
                    add_vec(&mut grads, a.0, da);
                }
                Op::ConcatCols(a, b) => {
                    let (p, q) = (self.nodes[a.0].cols, self.nodes[b.0].cols);
                    let m = node.rows;
                    {
                        let da = ensure(&mut grads, a.0, m * p);
                        for i in 0..m {
                            for j in 0..p {
                                da[i * p + j] += g[i * (p + q) + j];
                            }
                        }
                    }
                    let db = ensure(&mut grads, b.0, m * q);
                    for i in 0..m {
                        for j in 0..q {
                            db[i * q + j] += g[i * (p + q) + p + j];
                        }
                    }
                }
                Op::Reshape(a) => axpy_into(&mut grads, a.0, &g, 1.0),
                Op::SliceRows(a, r0) => {
                    let n = node.cols;
                    let start = r0 * n;
                    let da = ensure(&mut grads, a.0, self.nodes[a.0].data.len());
                    for (d, gi) in da[start..start + g.len()].iter_mut().zip(g.iter()) {
                        *d += *gi;
                    }
                }
                Op::RepeatRow(v) => {
                    let n = node.cols;
                    let dv = ensure(&mut grads, v.0, n);
                    for chunk in g.chunks(n) {
                        for (d, gi) in dv.iter_mut().zip(chunk.iter()) {
                            *d += *gi;
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node; zeros if the node is unreachable.
    pub fn get(&self, g: &Graph, id: NodeId) -> Vec<f64> {
        match &self.grads[id.0] {
            Some(v) => v.clone(),
            None => vec![0.0; g.nodes[id.0].data.len()],
        }
    }

    pub fn try_get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Move the gradient out without copying; zeros if unreachable.
    pub fn take(&mut self, g: &Graph, id: NodeId) -> Vec<f64> {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| vec![0.0; g.nodes[id.0].data.len()])
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn ensure<'a>(grads: &'a mut [Option<Vec<f64>>], i: usize, len: usize) -> &'a mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_vec(grads: &mut [Option<Vec<f64>>], i: usize, v: Vec<f64>) {
    match &mut grads[i] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(v.iter()) {
                *a += x;
            }
        }
        None => grads[i] = Some(v),
    }
}

fn axpy_into(grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64], scale: f64) {
    match &mut grads[i] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g.iter()) {
                *a += scale * x;
            }
        }
        None => grads[i] = Some(g.iter().map(|x| scale * x).collect()),
    }
}

/// `out (+)= A[m,k] · B[k,n]`. Each output element is a fixed-order dot
/// product; parallel chunks never overlap, so the result is deterministic.
pub fn mat_mul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !acc {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    let work = m * k * n;
    if m == 1 && work >= PAR_THRESHOLD {
        // Vector-matrix: split output columns into disjoint chunks so each
        // chunk streams contiguous row segments of `b`.
        const CH: usize = 8192;
        out.par_chunks_mut(CH).enumerate().for_each(|(ci, chunk)| {
            let j0 = ci * CH;
            for (l, &av) in a.iter().enumerate() {
                if av != 0.0 {
                    let bs = &b[l * n + j0..l * n + j0 + chunk.len()];
                    for (o, &bv) in chunk.iter_mut().zip(bs.iter()) {
                        *o += av * bv;
                    }
                }
            }
        });
    } else if work >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
            let arow = &a[i * k..(i + 1) * k];
            for (l, &av) in arow.iter().enumerate() {
                if av != 0.0 {
                    let brow = &b[l * n..(l + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                        *o += av * bv;
                    }
                }
            }
        });
    } else {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (l, &av) in arow.iter().enumerate() {
                if av != 0.0 {
                    let brow = &b[l * n..(l + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                        *o += av * bv;
                    }
                }
            }
        }
    }
}

/// `out += G[m,n] · Bᵀ` where `B` is `[k, n]`; result is `[m, k]`.
pub fn mat_mul_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    let work = m * k * n;
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(k).enumerate().for_each(|(i, orow)| {
            let grow = &g[i * n..(i + 1) * n];
            for (l, o) in orow.iter_mut().enumerate() {
                let brow = &b[l * n..(l + 1) * n];
                let mut s = 0.0;
                for (gi, bv) in grow.iter().zip(brow.iter()) {
                    s += gi * bv;
                }
                *o += s;
            }
        });
    } else {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            let orow = &mut out[i * k..(i + 1) * k];
            for (l, o) in orow.iter_mut().enumerate() {
                let brow = &b[l * n..(l + 1) * n];
                let mut s = 0.0;
                for (gi, bv) in grow.iter().zip(brow.iter()) {
                    s += gi * bv;
                }
                *o += s;
            }
        }
    }
}

/// `out += Aᵀ · G` where `A` is `[m, k]` and `G` is `[m, n]`; result `[k, n]`.
pub fn mat_mul_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let work = m * k * n;
    if work >= PAR_THRESHOLD && k >= 4 {
        out.par_chunks_mut(n).enumerate().for_each(|(l, orow)| {
            for i in 0..m {
                let av = a[i * k + l];
                if av != 0.0 {
                    let grow = &g[i * n..(i + 1) * n];
                    for (o, &gv) in orow.iter_mut().zip(grow.iter()) {
                        *o += av * gv;
                    }
                }
            }
        });
    } else {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for l in 0..k {
                let av = a[i * k + l];
                if av != 0.0 {
                    let orow = &mut out[l * n..(l + 1) * n];
                    for (o, &gv) in orow.iter_mut().zip(grow.iter()) {
                        *o += av * gv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{tags, Rng};

    const FD_H: f64 = 1e-5;

    /// Central finite differences of a scalar function of one tensor,
    /// holding the others fixed.
    fn fd_grad(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], which: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(inputs[which].len());
        for i in 0..inputs[which].len() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[which].data_mut()[i] += FD_H;
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[which].data_mut()[i] -= FD_H;
            out.push((f(&plus) - f(&minus)) / (2.0 * FD_H));
        }
        out
    }

    fn assert_grad_close(analytic: &[f64], fd: &[f64], what: &str) {
        assert_eq!(analytic.len(), fd.len());
        for (i, (&a, &b)) in analytic.iter().zip(fd.iter()).enumerate() {
            let scale = a.abs().max(b.abs());
            if scale < 1e-7 {
                continue;
            }
            let rel = (a - b).abs() / scale;
            assert!(
                rel < 1e-4,
                "{what}[{i}]: analytic {a} vs fd {b} (rel {rel})"
            );
        }
    }

    fn rand_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        Tensor::from_vec(rows, cols, data)
    }

    #[test]
    fn matmul_sum_gradient_is_outer_product() {
        let mut rng = Rng::derive(11, &[tags::INIT]);
        let w = rand_tensor(3, 4, &mut rng);
        let x = rand_tensor(4, 2, &mut rng);
        let f = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let w = g.leaf(&ts[0]);
            let x = g.leaf(&ts[1]);
            let y = g.matmul(w, x);
            let s = g.sum(y);
            g.scalar_value(s)
        };
        let inputs = [w.clone(), x.clone()];
        let mut g = Graph::new();
        let wid = g.leaf(&w);
        let xid = g.leaf(&x);
        let y = g.matmul(wid, xid);
        let s = g.sum(y);
        let grads = g.backward(s);
        // dL/dw[i, k] = sum_j x[k, j]: outer-product structure over rows.
        let dw = grads.get(&g, wid);
        for i in 0..3 {
            for k in 0..4 {
                let expect: f64 = (0..2).map(|j| x.get(k, j)).sum();
                assert!((dw[i * 4 + k] - expect).abs() < 1e-12);
            }
        }
        assert_grad_close(&dw, &fd_grad(&f, &inputs, 0), "dw");
    }

    #[test]
    fn relu_kills_gradient_of_dead_unit() {
        let x = Tensor::row(&[-0.5, 0.3]);
        let mut g = Graph::new();
        let xid = g.leaf(&x);
        let y = g.relu(xid);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(&g, xid), vec![0.0, 1.0]);
    }

    #[test]
    fn softmax_weighted_mean_matches_fd() {
        let mut rng = Rng::derive(12, &[tags::INIT]);
        let z = rand_tensor(2, 5, &mut rng);
        let c = rand_tensor(2, 5, &mut rng);
        let f = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let z = g.leaf(&ts[0]);
            let c = g.leaf(&ts[1]);
            let p = g.softmax(z);
            let w = g.mul(p, c);
            let m = g.mean(w);
            g.scalar_value(m)
        };
        let inputs = [z.clone(), c.clone()];
        let mut g = Graph::new();
        let zid = g.leaf(&z);
        let cid = g.leaf(&c);
        let p = g.softmax(zid);
        let w = g.mul(p, cid);
        let m = g.mean(w);
        let grads = g.backward(m);
        assert_grad_close(&grads.get(&g, zid), &fd_grad(&f, &inputs, 0), "dz");
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = Rng::derive(13, &[tags::INIT]);
        for _ in 0..20 {
            let z = rand_tensor(4, 7, &mut rng);
            let mut g = Graph::new();
            let zid = g.leaf(&z);
            let p = g.softmax(zid);
            for row in g.value(p).chunks(7) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn clip_boundary_takes_interior_subgradient() {
        let x = Tensor::row(&[0.8, 1.2, 1.0, 2.0]);
        let mut g = Graph::new();
        let xid = g.leaf(&x);
        let y = g.clip(xid, 0.8, 1.2);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(&g, xid), vec![1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn min_tie_routes_gradient_to_first_argument() {
        let a = Tensor::row(&[1.0, 3.0]);
        let b = Tensor::row(&[1.0, 2.0]);
        let mut g = Graph::new();
        let aid = g.leaf(&a);
        let bid = g.leaf(&b);
        let y = g.min2(aid, bid);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(&g, aid), vec![1.0, 0.0]);
        assert_eq!(grads.get(&g, bid), vec![0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::row(&[1.0, 2.0]);
        let r = std::panic::catch_unwind(|| {
            let mut g = Graph::new();
            let xid = g.leaf(&x);
            let y = g.relu(xid);
            g.backward(y);
        });
        assert!(r.is_err());
    }

    /// A composition exercising every differentiable op; checked against
    /// central finite differences at 100 random configurations.
    #[test]
    fn composed_ops_match_finite_differences_at_100_configs() {
        for trial in 0..100 {
            let mut rng = Rng::derive(100 + trial, &[tags::INIT]);
            let m = 2 + (trial as usize % 3);
            let k = 3 + (trial as usize % 2);
            let x = rand_tensor(m, k, &mut rng);
            let w = rand_tensor(k + 3, 4, &mut rng);
            let bias = rand_tensor(1, 4, &mut rng);
            let gain = rand_tensor(1, 4, &mut rng);
            let emb = rand_tensor(1, 3, &mut rng);
            let idx: Vec<usize> = (0..m).map(|i| i % 4).collect();
            let eval = |ts: &[Tensor]| {
                let mut g = Graph::new();
                let x = g.leaf(&ts[0]);
                let w = g.leaf(&ts[1]);
                let b = g.leaf(&ts[2]);
                let gain = g.leaf(&ts[3]);
                let emb = g.leaf(&ts[4]);
                let rep = g.repeat_row(emb, m);
                let xin = g.concat_cols(x, rep);
                let wth = g.reshape(w, k + 3, 4);
                let x4 = g.matmul(xin, wth);
                let one_plus = g.add_scalar(gain, 1.0);
                let modulated = g.mul_row(x4, one_plus);
                let pre = g.add_row(modulated, b);
                let h = g.relu(pre);
                let sm = g.softmax(h);
                let lsm = g.log_softmax(h);
                let picked = g.pick(lsm, &idx);
                let e = g.exp(picked);
                let clipped = g.clip(e, 0.8, 1.2);
                let prod = g.mul(e, clipped);
                let diff = g.sub(prod, picked);
                let scaled = g.scale(diff, 0.5);
                let part1 = g.sum(scaled);
                let logs = g.log(sm);
                let ent = g.mul(sm, logs);
                let part2 = g.mean(ent);
                let esum = g.sum(rep);
                let mn = g.min2(part1, part2);
                let tot = g.add(mn, part2);
                let tot2 = g.add(tot, esum);
                g.scalar_value(tot2)
            };
            let inputs = [x, w, bias, gain, emb];
            // Analytic gradients.
            let mut g = Graph::new();
            let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t)).collect();
            let val = {
                let x = ids[0];
                let w = ids[1];
                let b = ids[2];
                let gain = ids[3];
                let emb = ids[4];
                let rep = g.repeat_row(emb, m);
                let xin = g.concat_cols(x, rep);
                let wth = g.reshape(w, k + 3, 4);
                let x4 = g.matmul(xin, wth);
                let one_plus = g.add_scalar(gain, 1.0);
                let modulated = g.mul_row(x4, one_plus);
                let pre = g.add_row(modulated, b);
                let h = g.relu(pre);
                let sm = g.softmax(h);
                let lsm = g.log_softmax(h);
                let picked = g.pick(lsm, &idx);
                let e = g.exp(picked);
                let clipped = g.clip(e, 0.8, 1.2);
                let prod = g.mul(e, clipped);
                let diff = g.sub(prod, picked);
                let scaled = g.scale(diff, 0.5);
                let part1 = g.sum(scaled);
                let logs = g.log(sm);
                let ent = g.mul(sm, logs);
                let part2 = g.mean(ent);
                let esum = g.sum(rep);
                let mn = g.min2(part1, part2);
                let tot = g.add(mn, part2);
                g.add(tot, esum)
            };
            let grads = g.backward(val);
            for (which, id) in ids.iter().enumerate() {
                let analytic = grads.get(&g, *id);
                let fd = fd_grad(&eval, &inputs, which);
                assert_grad_close(&analytic, &fd, &format!("trial {trial} input {which}"));
            }
        }
    }

    #[test]
    fn parallel_and_serial_matmul_agree_bitwise() {
        let mut rng = Rng::derive(55, &[tags::INIT]);
        // Large enough to cross the parallel threshold.
        let m = 8;
        let k = 64;
        let n = 1024;
        let a = rand_tensor(m, k, &mut rng);
        let b = rand_tensor(k, n, &mut rng);
        let mut par = vec![0.0; m * n];
        mat_mul(a.data(), b.data(), &mut par, m, k, n, false);
        let mut serial = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = a.data()[i * k + l];
                for j in 0..n {
                    serial[i * n + j] += av * b.data()[l * n + j];
                }
            }
        }
        assert_eq!(par, serial);

        // Vector-matrix path.
        let a1 = rand_tensor(1, 512, &mut rng);
        let b1 = rand_tensor(512, 2048, &mut rng);
        let mut par1 = vec![0.0; 2048];
        mat_mul(a1.data(), b1.data(), &mut par1, 1, 512, 2048, false);
        let mut ser1 = vec![0.0; 2048];
        for l in 0..512 {
            let av = a1.data()[l];
            for j in 0..2048 {
                ser1[j] += av * b1.data()[l * 2048 + j];
            }
        }
        assert_eq!(par1, ser1);
    }
}
