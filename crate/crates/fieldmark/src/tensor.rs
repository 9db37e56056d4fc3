//! Dense `f64` tensors, a reverse-mode autodiff tape, and the small neural
//! toolkit built on top of it (MLPs, softmax cross-entropy, SGD + momentum).
//!
//! The tape is an append-only arena: every operation evaluates eagerly,
//! stores its result, and records its input node ids. [`Tape::backward`]
//! walks the arena once in reverse creation order, so each node's gradient
//! is accumulated exactly once. All loops run in a fixed order, which makes
//! forward and backward bit-deterministic for identical inputs.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node handle into a [`Tape`].
pub type NodeId = usize;

/// Dense row-major tensor. The empty shape `[]` is a scalar with one entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix (2-d tensor).
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix shape {:?}", self.shape);
        self.shape[0]
    }

    /// Column count of a matrix (2-d tensor).
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix shape {:?}", self.shape);
        self.shape[1]
    }

    /// Entry of a matrix by row and column.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// Broadcast-add a length-`n` vector to every row of an `[m, n]` matrix.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    ClampMin(NodeId, f64),
    ConcatLast(NodeId, NodeId),
    MeanAxis0(NodeId),
    SumAxis0(NodeId),
    LogSoftmax(NodeId),
    /// Spread the columns of `[m, k]` into a wider `[m, n]` at `col_map`
    /// positions; unmapped destination columns hold a constant that receives
    /// no gradient.
    PlaceCols { src: NodeId, col_map: Vec<usize>, fill_cols: usize },
    GatherRows { src: NodeId, idx: Vec<usize> },
    ScatterAddRows { src: NodeId, idx: Vec<usize> },
    /// Per-row vector-matrix product: row `e` of the output is
    /// `p[e] * M_e` where `M_e` is row `e` of `q` viewed as a `k x m` matrix.
    BatchVecmat { p: NodeId, q: NodeId },
    ///`-mean_i logp[i, labels[i]]` — scalar negative log-likelihood.
    NllRows { logp: NodeId, labels: Vec<usize> },
    Reshape(NodeId),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Append-only autodiff arena. See the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    poisoned: Option<&'static str>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Name of the first op that produced a non-finite value, if any.
    ///
    /// A NaN or infinity anywhere is an error state, not a panic: callers
    /// running a training step check this and report divergence instead of
    /// crashing mid-run.
    pub fn poisoned(&self) -> Option<&'static str> {
        self.poisoned
    }

    fn check_finite(&mut self, data: &[f64], op: &'static str) {
        if self.poisoned.is_none() && !data.iter().all(|v| v.is_finite()) {
            self.poisoned = Some(op);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    /// Snapshot a node's value as an owned tensor.
    pub fn value(&self, id: NodeId) -> Tensor {
        Tensor {
            shape: self.nodes[id].shape.clone(),
            data: self.nodes[id].data.clone(),
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, shape, data });
        self.nodes.len() - 1
    }

    /// Record a constant (or parameter) input.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].shape, self.nodes[b].shape, "add shape mismatch");
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        self.check_finite(&data, "add");
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Add(a, b), shape, data)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, n) = mat_shape(&self.nodes[a].shape, "add_row");
        assert_eq!(self.nodes[row].shape, vec![n], "add_row vector mismatch");
        let mut data = self.nodes[a].data.clone();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += self.nodes[row].data[c];
            }
        }
        self.check_finite(&data, "add_row");
        self.push(Op::AddRow(a, row), vec![m, n], data)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].shape, self.nodes[b].shape, "mul shape mismatch");
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x * y)
            .collect();
        self.check_finite(&data, "mul");
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Mul(a, b), shape, data)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = mat_shape(&self.nodes[a].shape, "matmul lhs");
        let (kb, n) = mat_shape(&self.nodes[b].shape, "matmul rhs");
        assert_eq!(ka, kb, "matmul inner dimension mismatch: {ka} vs {kb}");
        let mut data = vec![0.0; m * n];
        {
            let av = &self.nodes[a].data;
            let bv = &self.nodes[b].data;
            for i in 0..m {
                let out_row = &mut data[i * n..(i + 1) * n];
                for k in 0..ka {
                    let aik = av[i * ka + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let b_row = &bv[k * n..(k + 1) * n];
                    for (o, bv) in out_row.iter_mut().zip(b_row) {
                        *o += aik * bv;
                    }
                }
            }
        }
        self.check_finite(&data, "matmul");
        self.push(Op::Matmul(a, b), vec![m, n], data)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Relu(a), shape, data)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|v| v.exp()).collect();
        self.check_finite(&data, "exp");
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Exp(a), shape, data)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|v| v.ln()).collect();
        self.check_finite(&data, "ln");
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Ln(a), shape, data)
    }

    /// Elementwise `max(x, lo)`. Clamped entries get zero gradient.
    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|v| v.max(lo)).collect();
        let shape = self.nodes[a].shape.clone();
        self.push(Op::ClampMin(a, lo), shape, data)
    }

    /// Concatenate two matrices along the last axis.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, na) = mat_shape(&self.nodes[a].shape, "concat lhs");
        let (mb, nb) = mat_shape(&self.nodes[b].shape, "concat rhs");
        assert_eq!(m, mb, "concat row mismatch");
        let mut data = Vec::with_capacity(m * (na + nb));
        for r in 0..m {
            data.extend_from_slice(&self.nodes[a].data[r * na..(r + 1) * na]);
            data.extend_from_slice(&self.nodes[b].data[r * nb..(r + 1) * nb]);
        }
        self.push(Op::ConcatLast(a, b), vec![m, na + nb], data)
    }

    /// Mean over the first axis: `[d0, rest...] -> [rest...]`.
    pub fn mean_axis0(&mut self, a: NodeId) -> NodeId {
        let (d0, rest, cols) = leading_split(&self.nodes[a].shape, "mean_axis0");
        let mut data = vec![0.0; cols];
        for r in 0..d0 {
            for c in 0..cols {
                data[c] += self.nodes[a].data[r * cols + c];
            }
        }
        for v in &mut data {
            *v /= d0 as f64;
        }
        self.check_finite(&data, "mean_axis0");
        self.push(Op::MeanAxis0(a), rest, data)
    }

    /// Sum over the first axis: `[d0, rest...] -> [rest...]`.
    pub fn sum_axis0(&mut self, a: NodeId) -> NodeId {
        let (d0, rest, cols) = leading_split(&self.nodes[a].shape, "sum_axis0");
        let mut data = vec![0.0; cols];
        for r in 0..d0 {
            for c in 0..cols {
                data[c] += self.nodes[a].data[r * cols + c];
            }
        }
        self.check_finite(&data, "sum_axis0");
        self.push(Op::SumAxis0(a), rest, data)
    }

    /// Row-wise log-softmax over the last axis of a matrix.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let (m, n) = mat_shape(&self.nodes[a].shape, "log_softmax");
        assert!(n > 0, "log_softmax over empty rows");
        let mut data = self.nodes[a].data.clone();
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.check_finite(&data, "log_softmax");
        self.push(Op::LogSoftmax(a), vec![m, n], data)
    }

    /// Place columns of `src` into a wider matrix: destination column
    /// `col_map[j]` takes source column `j`; every other destination column
    /// is the constant `fill` (excluded from the gradient).
    pub fn place_cols(&mut self, src: NodeId, col_map: &[usize], out_cols: usize, fill: f64) -> NodeId {
        let (m, k) = mat_shape(&self.nodes[src].shape, "place_cols");
        assert_eq!(col_map.len(), k, "place_cols map length mismatch");
        assert!(col_map.iter().all(|c| *c < out_cols), "place_cols column out of range");
        let mut data = vec![fill; m * out_cols];
        for r in 0..m {
            for (j, &dst) in col_map.iter().enumerate() {
                data[r * out_cols + dst] = self.nodes[src].data[r * k + j];
            }
        }
        self.push(
            Op::PlaceCols { src, col_map: col_map.to_vec(), fill_cols: out_cols },
            vec![m, out_cols],
            data,
        )
    }

    /// Select rows of a matrix by index (indices may repeat).
    pub fn gather_rows(&mut self, src: NodeId, idx: &[usize]) -> NodeId {
        let (m, n) = mat_shape(&self.nodes[src].shape, "gather_rows");
        assert!(idx.iter().all(|i| *i < m), "gather_rows index out of range");
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.nodes[src].data[i * n..(i + 1) * n]);
        }
        self.push(
            Op::GatherRows { src, idx: idx.to_vec() },
            vec![idx.len(), n],
            data,
        )
    }

    /// Accumulate rows of `src` into an `[out_rows, n]` matrix at `idx`
    /// positions; rows sharing a destination are summed in source order.
    pub fn scatter_add_rows(&mut self, src: NodeId, idx: &[usize], out_rows: usize) -> NodeId {
        let (m, n) = mat_shape(&self.nodes[src].shape, "scatter_add_rows");
        assert_eq!(idx.len(), m, "scatter_add_rows index length mismatch");
        assert!(idx.iter().all(|i| *i < out_rows), "scatter_add_rows index out of range");
        let mut data = vec![0.0; out_rows * n];
        for (r, &dst) in idx.iter().enumerate() {
            for c in 0..n {
                data[dst * n + c] += self.nodes[src].data[r * n + c];
            }
        }
        self.check_finite(&data, "scatter_add_rows");
        self.push(
            Op::ScatterAddRows { src, idx: idx.to_vec() },
            vec![out_rows, n],
            data,
        )
    }

    /// Per-row vector-matrix product. `p` is `[e, k]`; `q` is `[e, k * m]`
    /// holding a row-major `k x m` matrix per row; the result is `[e, m]`
    /// with `out[e, c] = sum_l p[e, l] * q[e, l * m + c]`.
    pub fn batch_vecmat(&mut self, p: NodeId, q: NodeId) -> NodeId {
        let (ep, k) = mat_shape(&self.nodes[p].shape, "batch_vecmat lhs");
        let (eq, km) = mat_shape(&self.nodes[q].shape, "batch_vecmat rhs");
        assert_eq!(ep, eq, "batch_vecmat row mismatch");
        assert!(k > 0 && km % k == 0, "batch_vecmat: rhs cols {km} not divisible by {k}");
        let m = km / k;
        let mut data = vec![0.0; ep * m];
        for e in 0..ep {
            let pv = &self.nodes[p].data[e * k..(e + 1) * k];
            let qv = &self.nodes[q].data[e * km..(e + 1) * km];
            let out = &mut data[e * m..(e + 1) * m];
            for (l, &pl) in pv.iter().enumerate() {
                let q_row = &qv[l * m..(l + 1) * m];
                for (o, &qv) in out.iter_mut().zip(q_row) {
                    *o += pl * qv;
                }
            }
        }
        self.check_finite(&data, "batch_vecmat");
        self.push(Op::BatchVecmat { p, q }, vec![ep, m], data)
    }

    /// Scalar `-mean_i logp[i, labels[i]]`.
    pub fn nll_rows(&mut self, logp: NodeId, labels: &[usize]) -> NodeId {
        let (m, n) = mat_shape(&self.nodes[logp].shape, "nll_rows");
        assert_eq!(labels.len(), m, "nll_rows label count mismatch");
        assert!(labels.iter().all(|l| *l < n), "nll_rows label out of range");
        assert!(m > 0, "nll_rows over zero rows");
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            total -= self.nodes[logp].data[r * n + y];
        }
        let loss = total / m as f64;
        self.check_finite(std::slice::from_ref(&loss), "nll_rows");
        self.push(Op::NllRows { logp, labels: labels.to_vec() }, vec![], vec![loss])
    }

    /// Reinterpret a node's data under a new shape of the same volume.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.nodes[a].data.len(), "reshape volume mismatch");
        let data = self.nodes[a].data.clone();
        self.push(Op::Reshape(a), shape, data)
    }

    /// Reverse-mode sweep from a scalar node. Returns one gradient slot per
    /// node (`None` when the loss does not depend on it); each slot is filled
    /// exactly once because nodes are visited in reverse creation order.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert!(
            self.nodes[loss].data.len() == 1,
            "backward expects a scalar loss, got shape {:?}",
            self.nodes[loss].shape
        );
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let Some(gout) = g[id].take() else { continue };
            self.accumulate(id, &gout, &mut g);
            g[id] = Some(gout);
        }
        Grads { tape_shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(), g }
    }

    fn accumulate(&self, id: NodeId, gout: &[f64], g: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let slot = |target: NodeId, g: &mut [Option<Vec<f64>>], f: &mut dyn FnMut(&mut [f64])| {
            let buf = g[target].get_or_insert_with(|| vec![0.0; self.nodes[target].data.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                slot(*a, g, &mut |buf| {
                    for (o, v) in buf.iter_mut().zip(gout) {
                        *o += v;
                    }
                });
                slot(*b, g, &mut |buf| {
                    for (o, v) in buf.iter_mut().zip(gout) {
                        *o += v;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = self.nodes[*row].data.len();
                slot(*a, g, &mut |buf| {
                    for (o, v) in buf.iter_mut().zip(gout) {
                        *o += v;
                    }
                });
                slot(*row, g, &mut |buf| {
                    for (i, v) in gout.iter().enumerate() {
                        buf[i % n] += v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].data, &self.nodes[*b].data);
                slot(*a, g, &mut |buf| {
                    for i in 0..gout.len() {
                        buf[i] += gout[i] * bv[i];
                    }
                });
                slot(*b, g, &mut |buf| {
                    for i in 0..gout.len() {
                        buf[i] += gout[i] * av[i];
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = mat_shape(&self.nodes[*a].shape, "matmul");
                let n = self.nodes[*b].shape[1];
                let (av, bv) = (&self.nodes[*a].data, &self.nodes[*b].data);
                // dA = G * B^T
                slot(*a, g, &mut |buf| {
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            let g_row = &gout[i * n..(i + 1) * n];
                            let b_row = &bv[kk * n..(kk + 1) * n];
                            for (gv, bb) in g_row.iter().zip(b_row) {
                                acc += gv * bb;
                            }
                            buf[i * k + kk] += acc;
                        }
                    }
                });
                // dB = A^T * G
                slot(*b, g, &mut |buf| {
                    for i in 0..m {
                        let g_row = &gout[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            let out_row = &mut buf[kk * n..(kk + 1) * n];
                            for (o, gv) in out_row.iter_mut().zip(g_row) {
                                *o += aik * gv;
                            }
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = &self.nodes[*a].data;
                slot(*a, g, &mut |buf| {
                    for i in 0..gout.len() {
                        if av[i] > 0.0 {
                            buf[i] += gout[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let out = &node.data;
                slot(*a, g, &mut |buf| {
                    for i in 0..gout.len() {
                        buf[i] += gout[i] * out[i];
                    }
                });
            }
            Op::Ln(a) => {
                let av = &self.nodes[*a].data;
                slot(*a, g, &mut |buf| {
                    for i in 0..gout.len() {
                        buf[i] += gout[i] / av[i];
                    }
                });
            }
            Op::ClampMin(a, lo) => {
                let av = &self.nodes[*a].data;
                slot(*a, g, &mut |buf| {
                    for i in 0..gout.len() {
                        if av[i] > *lo {
                            buf[i] += gout[i];
                        }
                    }
                });
            }
            Op::ConcatLast(a, b) => {
                let na = *self.nodes[*a].shape.last().unwrap();
                let nb = *self.nodes[*b].shape.last().unwrap();
                let m = self.nodes[*a].data.len() / na;
                slot(*a, g, &mut |buf| {
                    for r in 0..m {
                        for c in 0..na {
                            buf[r * na + c] += gout[r * (na + nb) + c];
                        }
                    }
                });
                slot(*b, g, &mut |buf| {
                    for r in 0..m {
                        for c in 0..nb {
                            buf[r * nb + c] += gout[r * (na + nb) + na + c];
                        }
                    }
                });
            }
            Op::MeanAxis0(a) => {
                let (d0, _, cols) = leading_split(&self.nodes[*a].shape, "mean_axis0");
                let inv = 1.0 / d0 as f64;
                slot(*a, g, &mut |buf| {
                    for r in 0..d0 {
                        for c in 0..cols {
                            buf[r * cols + c] += gout[c] * inv;
                        }
                    }
                });
            }
            Op::SumAxis0(a) => {
                let (d0, _, cols) = leading_split(&self.nodes[*a].shape, "sum_axis0");
                slot(*a, g, &mut |buf| {
                    for r in 0..d0 {
                        for c in 0..cols {
                            buf[r * cols + c] += gout[c];
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (m, n) = mat_shape(&node.shape, "log_softmax");
                let out = &node.data;
                slot(*a, g, &mut |buf| {
                    for r in 0..m {
                        let g_row = &gout[r * n..(r + 1) * n];
                        let gsum: f64 = g_row.iter().sum();
                        for c in 0..n {
                            buf[r * n + c] += g_row[c] - out[r * n + c].exp() * gsum;
                        }
                    }
                });
            }
            Op::PlaceCols { src, col_map, fill_cols } => {
                let k = col_map.len();
                let m = self.nodes[*src].data.len() / k;
                slot(*src, g, &mut |buf| {
                    for r in 0..m {
                        for (j, &dst) in col_map.iter().enumerate() {
                            buf[r * k + j] += gout[r * fill_cols + dst];
                        }
                    }
                });
            }
            Op::GatherRows { src, idx } => {
                let n = self.nodes[*src].shape[1];
                slot(*src, g, &mut |buf| {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..n {
                            buf[i * n + c] += gout[r * n + c];
                        }
                    }
                });
            }
            Op::ScatterAddRows { src, idx } => {
                let n = self.nodes[*src].shape[1];
                slot(*src, g, &mut |buf| {
                    for (r, &dst) in idx.iter().enumerate() {
                        for c in 0..n {
                            buf[r * n + c] += gout[dst * n + c];
                        }
                    }
                });
            }
            Op::BatchVecmat { p, q } => {
                let (e, k) = mat_shape(&self.nodes[*p].shape, "batch_vecmat");
                let km = self.nodes[*q].shape[1];
                let m = km / k;
                let (pv, qv) = (&self.nodes[*p].data, &self.nodes[*q].data);
                slot(*p, g, &mut |buf| {
                    for row in 0..e {
                        let g_row = &gout[row * m..(row + 1) * m];
                        for l in 0..k {
                            let q_row = &qv[row * km + l * m..row * km + (l + 1) * m];
                            let mut acc = 0.0;
                            for (gv, qq) in g_row.iter().zip(q_row) {
                                acc += gv * qq;
                            }
                            buf[row * k + l] += acc;
                        }
                    }
                });
                slot(*q, g, &mut |buf| {
                    for row in 0..e {
                        let g_row = &gout[row * m..(row + 1) * m];
                        for l in 0..k {
                            let pl = pv[row * k + l];
                            if pl == 0.0 {
                                continue;
                            }
                            let out_row = &mut buf[row * km + l * m..row * km + (l + 1) * m];
                            for (o, gv) in out_row.iter_mut().zip(g_row) {
                                *o += pl * gv;
                            }
                        }
                    }
                });
            }
            Op::NllRows { logp, labels } => {
                let n = self.nodes[*logp].shape[1];
                let scale = gout[0] / labels.len() as f64;
                slot(*logp, g, &mut |buf| {
                    for (r, &y) in labels.iter().enumerate() {
                        buf[r * n + y] -= scale;
                    }
                });
            }
            Op::Reshape(a) => {
                slot(*a, g, &mut |buf| {
                    for (o, v) in buf.iter_mut().zip(gout) {
                        *o += v;
                    }
                });
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    tape_shapes: Vec<Vec<usize>>,
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient for a node; zeros when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.g[id] {
            Some(data) => Tensor { shape: self.tape_shapes[id].clone(), data: data.clone() },
            None => Tensor::zeros(self.tape_shapes[id].clone()),
        }
    }
}

fn mat_shape(shape: &[usize], op: &str) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "{op} expects a matrix, got shape {shape:?}");
    (shape[0], shape[1])
}

/// Split `[d0, rest...]` into `(d0, rest, volume_of_rest)`.
fn leading_split(shape: &[usize], op: &str) -> (usize, Vec<usize>, usize) {
    assert!(!shape.is_empty(), "{op} expects at least one axis");
    let d0 = shape[0];
    assert!(d0 > 0, "{op} over an empty leading axis");
    let rest: Vec<usize> = shape[1..].to_vec();
    let cols = rest.iter().product();
    (d0, rest, cols)
}

// ---------------------------------------------------------------------------
// MLP, loss, optimizer
// ---------------------------------------------------------------------------

/// One dense layer: weights `[fan_in, fan_out]` plus a bias row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

/// A fully-connected ReLU network with a linear final layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

/// Tape handles for one inserted copy of an [`MlpParams`].
pub struct MlpIds {
    layers: Vec<(NodeId, NodeId)>,
}

impl MlpParams {
    /// Glorot-uniform initialization: weights drawn from
    /// `U(-sqrt(6 / (fan_in + fan_out)), +sqrt(6 / (fan_in + fan_out)))`,
    /// biases zero. `dims` lists layer widths input-first, e.g.
    /// `[16, 64, 64, 1]`.
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for win in dims.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| (2.0 * rng.gen::<f64>() - 1.0) * limit)
                .collect();
            layers.push(Dense {
                w: Tensor { shape: vec![fan_in, fan_out], data },
                b: Tensor::zeros(vec![fan_out]),
            });
        }
        MlpParams { layers }
    }

    /// Input width expected by the first layer.
    pub fn input_dim(&self) -> usize {
        self.layers[0].w.shape[0]
    }

    /// Output width of the last layer.
    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.shape[1]
    }

    /// Insert every weight and bias as tape leaves for one forward pass.
    pub fn insert(&self, tape: &mut Tape) -> MlpIds {
        MlpIds {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(&l.w), tape.leaf(&l.b)))
                .collect(),
        }
    }

    /// Run the network eagerly on a `[n, input_dim]` batch.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.shape().len() != 2 || input.shape()[1] != self.input_dim() {
            return Err(Error::invalid(format!(
                "mlp input shape {:?} does not match input dim {}",
                input.shape(),
                self.input_dim()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let ids = self.insert(&mut tape);
        let out = mlp_apply(&mut tape, x, &ids);
        Ok(tape.value(out))
    }

    /// Flat view of all parameter tensors in a fixed order (per layer:
    /// weights then bias). Optimizer state and checkpoints rely on this
    /// order being stable.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }
}

impl MlpIds {
    /// Pull this network's gradients out of a backward pass, in
    /// [`MlpParams::tensors`] order.
    pub fn grads(&self, grads: &Grads) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [grads.get(*w), grads.get(*b)])
            .collect()
    }
}

/// Apply an inserted MLP to a `[n, input_dim]` node: affine, ReLU between
/// layers, linear output.
pub fn mlp_apply(tape: &mut Tape, input: NodeId, ids: &MlpIds) -> NodeId {
    let mut x = input;
    let last = ids.layers.len() - 1;
    for (i, (w, b)) in ids.layers.iter().enumerate() {
        let z = tape.matmul(x, *w);
        x = tape.add_row(z, *b);
        if i < last {
            x = tape.relu(x);
        }
    }
    x
}

/// Mean softmax cross-entropy of integer labels against `[n, k]` logits.
///
/// Computed via max-shifted log-softmax, so it stays finite for extreme
/// logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.shape().len() != 2 {
        return Err(Error::invalid(format!(
            "cross-entropy expects [n, k] logits, got {:?}",
            logits.shape()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "cross-entropy got {n} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    if n == 0 {
        return Err(Error::invalid("cross-entropy over zero rows"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(logits);
    let lp = tape.log_softmax(x);
    let loss = tape.nll_rows(lp, labels);
    Ok(tape.data(loss)[0])
}

/// Piecewise-constant step decay: `base * decay^floor(iter / period)`.
pub fn lr_at(base: f64, decay: f64, period: usize, iter: usize) -> f64 {
    assert!(period > 0, "lr period must be positive");
    base * decay.powi((iter / period) as i32)
}

/// Heavy-ball SGD: `v <- momentum * v + g`, then `p <- p - lr * v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub velocity: Vec<Tensor>,
}

impl SgdMomentum {
    /// Fresh optimizer with zero velocity matching `params` shapes.
    pub fn new(momentum: f64, params: &[&Tensor]) -> Self {
        SgdMomentum {
            momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape.clone())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), self.velocity.len(), "optimizer state size mismatch");
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            assert_eq!(p.shape, g.shape, "gradient shape mismatch");
            for i in 0..p.data.len() {
                v.data[i] = self.momentum * v.data[i] + g.data[i];
                p.data[i] -= lr * v.data[i];
            }
        }
    }
}
