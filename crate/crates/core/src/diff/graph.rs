//! Reverse-mode differentiable compute graph over dense matrices.
//!
//! Nodes are appended in evaluation order, so the node index order is a
//! topological order and backward simply walks indices in reverse. Every
//! operation computes its forward value eagerly; `backward` propagates
//! adjoints from a scalar root and accumulates them into each node's `grad`.

use std::collections::BTreeMap;

use super::params::ParameterStore;
use super::tensor::{gemm, Tensor};
use crate::error::{GradError, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis for reductions that are not row-wise by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Normalize each column (across rows).
    Rows,
    /// Normalize each row (across columns).
    Cols,
}

/// Batch layout for [`Graph::causal_attention`]: `batch * seq` token rows,
/// `heads` equal-width slices of the feature dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    AddCol(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    LayerNorm { input: NodeId, inv_std: Vec<f64> },
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    SliceCols { input: NodeId, start: usize },
    GatherRows { input: NodeId, index: Vec<usize> },
    ScatterRows { input: NodeId, index: Vec<usize> },
    RowSum(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Mse(NodeId, NodeId),
    CosineRows(NodeId, NodeId),
    SegmentCosine { a: NodeId, b: NodeId, seg: usize },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
}

/// A value in the compute graph with its (lazily allocated) gradient.
#[derive(Debug, Clone)]
pub struct DiffNode {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

impl DiffNode {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn shape(&self) -> [usize; 2] {
        self.value.shape()
    }

    fn parents(&self) -> Vec<NodeId> {
        match &self.op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::AddCol(a, b)
            | Op::MulCol(a, b)
            | Op::MatMul(a, b)
            | Op::Mse(a, b)
            | Op::CosineRows(a, b) => vec![*a, *b],
            Op::SegmentCosine { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Clamp(a, _, _)
            | Op::Softmax(a)
            | Op::RowSum(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::LayerNorm { input, .. }
            | Op::SliceCols { input, .. }
            | Op::GatherRows { input, .. }
            | Op::ScatterRows { input, .. } => vec![*input],
            Op::Concat(xs) => xs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<DiffNode>,
    params: BTreeMap<String, NodeId>,
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

    pub fn node(&self, id: NodeId) -> &DiffNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient, or zeros when the node was never reached by backward.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        self.grad(id).cloned().unwrap_or_else(|| {
            let [r, c] = self.shape(id);
            Tensor::zeros(r, c)
        })
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(DiffNode {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf holding `value`. Leaves receive gradients like any other node.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.input(value)
    }

    /// Leaf for a named parameter. Repeated requests return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store
            .get(name)
            .ok_or_else(|| GradError::MissingParameter(name.to_string()))?
            .clone();
        let id = self.input(value);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Parameters used by this graph, keyed by path.
    pub fn params(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.input(v)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(GradError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let [r, c] = va.shape();
        let t = Tensor::from_vec(r, c, data).expect("shape checked");
        self.push(t, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    fn broadcast_row(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let [r, c] = self.shape(a);
        let sb = self.shape(b);
        if sb != [1, c] {
            return Err(GradError::ShapeMismatch {
                op: name,
                left: [r, c],
                right: sb,
            });
        }
        let va = self.value(a);
        let vb = self.value(b).data();
        let mut out = Vec::with_capacity(r * c);
        for row in 0..r {
            out.extend(va.row_slice(row).iter().zip(vb).map(|(&x, &y)| f(x, y)));
        }
        Ok(self.push(Tensor::from_vec(r, c, out)?, op))
    }

    fn broadcast_col(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let [r, c] = self.shape(a);
        let sb = self.shape(b);
        if sb != [r, 1] {
            return Err(GradError::ShapeMismatch {
                op: name,
                left: [r, c],
                right: sb,
            });
        }
        let va = self.value(a);
        let vb = self.value(b).data();
        let mut out = Vec::with_capacity(r * c);
        for row in 0..r {
            out.extend(va.row_slice(row).iter().map(|&x| f(x, vb[row])));
        }
        Ok(self.push(Tensor::from_vec(r, c, out)?, op))
    }

    /// `a[m, n] + b[1, n]` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_row("add_row", a, b, |x, y| x + y, Op::AddRow(a, b))
    }

    /// `a[m, n] * b[1, n]` broadcast over rows.
    pub fn mul_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_row("mul_row", a, b, |x, y| x * y, Op::MulRow(a, b))
    }

    /// `a[m, n] + b[m, 1]` broadcast over columns.
    pub fn add_col(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_col("add_col", a, b, |x, y| x + y, Op::AddCol(a, b))
    }

    /// `a[m, n] * b[m, 1]` broadcast over columns.
    pub fn mul_col(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_col("mul_col", a, b, |x, y| x * y, Op::MulCol(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                left: [m, k],
                right: [k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::from_vec(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `x[m, k] · w[k, n] + b[1, n]`.
    pub fn linear(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let t = transpose(self.value(a));
        self.push(t, Op::Transpose(a))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(a).map(f);
        self.push(v, op)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layernorm(&mut self, a: NodeId) -> NodeId {
        let (y, inv_std) = layernorm_rows(self.value(a));
        self.push(y, Op::LayerNorm { input: a, inv_std })
    }

    pub fn softmax(&mut self, a: NodeId, axis: Axis) -> NodeId {
        match axis {
            Axis::Cols => {
                let y = softmax_rows(self.value(a));
                self.push(y, Op::Softmax(a))
            }
            Axis::Rows => {
                let t = self.transpose(a);
                let s = self.softmax(t, Axis::Cols);
                self.transpose(s)
            }
        }
    }

    /// Column-wise concatenation of equal-height inputs.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs.first().ok_or(GradError::Empty("concat"))?;
        let rows = self.shape(first)[0];
        let mut cols = 0;
        for &x in xs {
            let s = self.shape(x);
            if s[0] != rows {
                return Err(GradError::ShapeMismatch {
                    op: "concat",
                    left: self.shape(first),
                    right: s,
                });
            }
            cols += s[1];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row_slice(r));
            }
        }
        Ok(self.push(Tensor::from_vec(rows, cols, out)?, Op::Concat(xs.to_vec())))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let [r, c] = self.shape(a);
        if start + len > c {
            return Err(GradError::ShapeMismatch {
                op: "slice_cols",
                left: [r, c],
                right: [r, start + len],
            });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&v.row_slice(row)[start..start + len]);
        }
        Ok(self.push(
            Tensor::from_vec(r, len, out)?,
            Op::SliceCols { input: a, start },
        ))
    }

    /// `out[i] = a[index[i]]`.
    pub fn gather_rows(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId> {
        let [r, c] = self.shape(a);
        let v = self.value(a);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(GradError::ShapeMismatch {
                    op: "gather_rows",
                    left: [r, c],
                    right: [i, c],
                });
            }
            out.extend_from_slice(v.row_slice(i));
        }
        Ok(self.push(
            Tensor::from_vec(index.len(), c, out)?,
            Op::GatherRows {
                input: a,
                index: index.to_vec(),
            },
        ))
    }

    /// `out` has `rows` rows, `out[index[i]] = a[i]`, zeros elsewhere.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, a: NodeId, index: &[usize], rows: usize) -> Result<NodeId> {
        let [r, c] = self.shape(a);
        if r != index.len() || index.iter().any(|&i| i >= rows) {
            return Err(GradError::ShapeMismatch {
                op: "scatter_rows",
                left: [r, c],
                right: [rows, c],
            });
        }
        let mut out = Tensor::zeros(rows, c);
        let v = self.value(a);
        for (src, &dst) in index.iter().enumerate() {
            out.data_mut()[dst * c..(dst + 1) * c].copy_from_slice(v.row_slice(src));
        }
        Ok(self.push(
            out,
            Op::ScatterRows {
                input: a,
                index: index.to_vec(),
            },
        ))
    }

    /// Sum over columns: `[m, n] -> [m, 1]`.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let out: Vec<f64> = (0..v.rows()).map(|r| v.row_slice(r).iter().sum()).collect();
        let t = Tensor::column(&out);
        self.push(t, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = va.len() as f64;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b)))
    }

    /// Row-wise cosine similarity, `[m, n] x [m, n] -> [m, 1]`.
    /// Rows where either operand has zero norm yield 0.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("cosine", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = (0..va.rows())
            .map(|r| cosine(va.row_slice(r), vb.row_slice(r)))
            .collect();
        let t = Tensor::column(&out);
        Ok(self.push(t, Op::CosineRows(a, b)))
    }

    /// Cosine similarity of each column of `a` against `b`, taken separately
    /// over consecutive row segments of length `seg`.
    ///
    /// `a: [S*seg, M]`, `b: [S*seg, 1]` gives `[S, M]`.
    pub fn segment_cosine(&mut self, a: NodeId, b: NodeId, seg: usize) -> Result<NodeId> {
        let [n, m] = self.shape(a);
        let sb = self.shape(b);
        if sb != [n, 1] || seg == 0 || n % seg != 0 {
            return Err(GradError::ShapeMismatch {
                op: "segment_cosine",
                left: [n, m],
                right: sb,
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let segments = n / seg;
        let mut out = Tensor::zeros(segments, m);
        for s in 0..segments {
            let bseg = &vb.data()[s * seg..(s + 1) * seg];
            for col in 0..m {
                let aseg: Vec<f64> = (0..seg).map(|t| va.get(s * seg + t, col)).collect();
                out.data_mut()[s * m + col] = cosine(&aseg, bseg);
            }
        }
        Ok(self.push(out, Op::SegmentCosine { a, b, seg }))
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    ///
    /// `q`, `k`, `v` are `[batch*seq, d]` with rows grouped by sequence. Query
    /// position `t` attends to keys `s <= t` that are valid; every query also
    /// attends to itself so fully padded prefixes stay well defined.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: AttentionLayout,
        key_valid: &[bool],
    ) -> Result<NodeId> {
        let sq = self.shape(q);
        let rows = layout.batch * layout.seq;
        for other in [k, v] {
            if self.shape(other) != sq {
                return Err(GradError::ShapeMismatch {
                    op: "causal_attention",
                    left: sq,
                    right: self.shape(other),
                });
            }
        }
        if sq[0] != rows || key_valid.len() != rows || layout.heads == 0 || sq[1] % layout.heads != 0
        {
            return Err(GradError::ShapeMismatch {
                op: "causal_attention",
                left: sq,
                right: [rows, layout.heads],
            });
        }
        let d = sq[1];
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let t_len = layout.seq;
        let mut probs = vec![0.0; layout.batch * layout.heads * t_len * t_len];
        let mut out = Tensor::zeros(rows, d);
        let mut scores = vec![f64::NEG_INFINITY; t_len];
        for b in 0..layout.batch {
            for h in 0..layout.heads {
                let off = h * dh;
                for t in 0..t_len {
                    let qi = b * t_len + t;
                    let qrow = &vq.row_slice(qi)[off..off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (s, score) in scores.iter_mut().enumerate() {
                        let ki = b * t_len + s;
                        if s > t || (!key_valid[ki] && s != t) {
                            *score = f64::NEG_INFINITY;
                            continue;
                        }
                        let krow = &vk.row_slice(ki)[off..off + dh];
                        let dot: f64 = qrow.iter().zip(krow).map(|(x, y)| x * y).sum();
                        *score = dot * scale;
                        max = max.max(*score);
                    }
                    let pbase = ((b * layout.heads + h) * t_len + t) * t_len;
                    let mut denom = 0.0;
                    for s in 0..t_len {
                        if scores[s] != f64::NEG_INFINITY {
                            let e = (scores[s] - max).exp();
                            probs[pbase + s] = e;
                            denom += e;
                        }
                    }
                    let orow = &mut out.data_mut()[qi * d + off..qi * d + off + dh];
                    for s in 0..t_len {
                        let p = probs[pbase + s];
                        if p == 0.0 {
                            continue;
                        }
                        let p = p / denom;
                        probs[pbase + s] = p;
                        let vrow = &vv.row_slice(b * t_len + s)[off..off + dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar root. Gradients accumulate across calls.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let shape = self.shape(root);
        if shape != [1, 1] {
            return Err(GradError::NonScalarRoot(shape));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            self.propagate(id, &g, &mut adj);
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(self, adj, *a).add_assign(g);
                acc(self, adj, *b).add_assign(g);
            }
            Op::Sub(a, b) => {
                acc(self, adj, *a).add_assign(g);
                let gb = acc(self, adj, *b);
                for (x, d) in gb.data_mut().iter_mut().zip(g.data()) {
                    *x -= d;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                for (x, (d, w)) in acc(self, adj, *a)
                    .data_mut()
                    .iter_mut()
                    .zip(g.data().iter().zip(vb.data()))
                {
                    *x += d * w;
                }
                for (x, (d, w)) in acc(self, adj, *b)
                    .data_mut()
                    .iter_mut()
                    .zip(g.data().iter().zip(va.data()))
                {
                    *x += d * w;
                }
            }
            Op::Scale(a, f) => {
                for (x, d) in acc(self, adj, *a).data_mut().iter_mut().zip(g.data()) {
                    *x += d * f;
                }
            }
            Op::AddRow(a, b) => {
                acc(self, adj, *a).add_assign(g);
                let cols = g.cols();
                let gb = acc(self, adj, *b);
                for r in 0..g.rows() {
                    for (x, d) in gb.data_mut().iter_mut().zip(g.row_slice(r)) {
                        *x += d;
                    }
                }
                debug_assert_eq!(gb.cols(), cols);
            }
            Op::MulRow(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let cols = g.cols();
                {
                    let ga = acc(self, adj, *a);
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            ga.data_mut()[r * cols + c] += g.get(r, c) * vb.data()[c];
                        }
                    }
                }
                let gb = acc(self, adj, *b);
                for r in 0..g.rows() {
                    for c in 0..cols {
                        gb.data_mut()[c] += g.get(r, c) * va.get(r, c);
                    }
                }
            }
            Op::AddCol(a, b) => {
                acc(self, adj, *a).add_assign(g);
                let gb = acc(self, adj, *b);
                for r in 0..g.rows() {
                    gb.data_mut()[r] += g.row_slice(r).iter().sum::<f64>();
                }
            }
            Op::MulCol(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let cols = g.cols();
                {
                    let ga = acc(self, adj, *a);
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            ga.data_mut()[r * cols + c] += g.get(r, c) * vb.data()[r];
                        }
                    }
                }
                let gb = acc(self, adj, *b);
                for r in 0..g.rows() {
                    let s: f64 = g
                        .row_slice(r)
                        .iter()
                        .zip(va.row_slice(r))
                        .map(|(d, x)| d * x)
                        .sum();
                    gb.data_mut()[r] += s;
                }
            }
            Op::MatMul(a, b) => {
                let [m, k] = self.shape(*a);
                let n = g.cols();
                let va = self.value(*a);
                let vb = self.value(*b);
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                gemm(
                    m,
                    n,
                    k,
                    g.data(),
                    false,
                    vb.data(),
                    true,
                    acc(self, adj, *a).data_mut(),
                    true,
                );
                gemm(
                    k,
                    m,
                    n,
                    va.data(),
                    true,
                    g.data(),
                    false,
                    acc(self, adj, *b).data_mut(),
                    true,
                );
            }
            Op::Transpose(a) => {
                acc(self, adj, *a).add_assign(&transpose(g));
            }
            Op::Tanh(a) => {
                for (x, (d, t)) in acc(self, adj, *a)
                    .data_mut()
                    .iter_mut()
                    .zip(g.data().iter().zip(y.data()))
                {
                    *x += d * (1.0 - t * t);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                for (x, (d, v)) in acc(self, adj, *a)
                    .data_mut()
                    .iter_mut()
                    .zip(g.data().iter().zip(va.data()))
                {
                    if *v > 0.0 {
                        *x += d;
                    }
                }
            }
            Op::Exp(a) => {
                for (x, (d, e)) in acc(self, adj, *a)
                    .data_mut()
                    .iter_mut()
                    .zip(g.data().iter().zip(y.data()))
                {
                    *x += d * e;
                }
            }
            Op::Square(a) => {
                let va = self.value(*a);
                for (x, (d, v)) in acc(self, adj, *a)
                    .data_mut()
                    .iter_mut()
                    .zip(g.data().iter().zip(va.data()))
                {
                    *x += 2.0 * d * v;
                }
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a);
                for (x, (d, v)) in acc(self, adj, *a)
                    .data_mut()
                    .iter_mut()
                    .zip(g.data().iter().zip(va.data()))
                {
                    if *v >= *lo && *v <= *hi {
                        *x += d;
                    }
                }
            }
            Op::LayerNorm { input, inv_std } => {
                let cols = g.cols();
                let n = cols as f64;
                let ga = acc(self, adj, *input);
                for r in 0..g.rows() {
                    let dy = g.row_slice(r);
                    let yr = y.row_slice(r);
                    let mean_dy = dy.iter().sum::<f64>() / n;
                    let mean_dyy = dy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    let s = inv_std[r];
                    for c in 0..cols {
                        ga.data_mut()[r * cols + c] += s * (dy[c] - mean_dy - yr[c] * mean_dyy);
                    }
                }
            }
            Op::Softmax(a) => {
                let cols = g.cols();
                let ga = acc(self, adj, *a);
                for r in 0..g.rows() {
                    let dy = g.row_slice(r);
                    let yr = y.row_slice(r);
                    let dot: f64 = dy.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        ga.data_mut()[r * cols + c] += yr[c] * (dy[c] - dot);
                    }
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let w = self.shape(x)[1];
                    let gx = acc(self, adj, x);
                    for r in 0..g.rows() {
                        for (dst, src) in gx.data_mut()[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(&g.row_slice(r)[off..off + w])
                        {
                            *dst += src;
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { input, start } => {
                let c_in = self.shape(*input)[1];
                let w = g.cols();
                let ga = acc(self, adj, *input);
                for r in 0..g.rows() {
                    for (dst, src) in ga.data_mut()[r * c_in + start..r * c_in + start + w]
                        .iter_mut()
                        .zip(g.row_slice(r))
                    {
                        *dst += src;
                    }
                }
            }
            Op::GatherRows { input, index } => {
                let c = g.cols();
                let ga = acc(self, adj, *input);
                for (src, &dst) in index.iter().enumerate() {
                    for (x, d) in ga.data_mut()[dst * c..(dst + 1) * c]
                        .iter_mut()
                        .zip(g.row_slice(src))
                    {
                        *x += d;
                    }
                }
            }
            Op::ScatterRows { input, index } => {
                let c = g.cols();
                let ga = acc(self, adj, *input);
                for (dst, &src) in index.iter().enumerate() {
                    for (x, d) in ga.data_mut()[dst * c..(dst + 1) * c]
                        .iter_mut()
                        .zip(g.row_slice(src))
                    {
                        *x += d;
                    }
                }
            }
            Op::RowSum(a) => {
                let cols = self.shape(*a)[1];
                let ga = acc(self, adj, *a);
                for r in 0..g.rows() {
                    let d = g.data()[r];
                    for x in &mut ga.data_mut()[r * cols..(r + 1) * cols] {
                        *x += d;
                    }
                }
            }
            Op::Sum(a) => {
                let d = g.item();
                for x in acc(self, adj, *a).data_mut() {
                    *x += d;
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let d = g.item() / n;
                for x in acc(self, adj, *a).data_mut() {
                    *x += d;
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = va.len() as f64;
                let d = g.item();
                let diff: Vec<f64> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| 2.0 * (x - y) / n * d)
                    .collect();
                for (x, dd) in acc(self, adj, *a).data_mut().iter_mut().zip(&diff) {
                    *x += dd;
                }
                for (x, dd) in acc(self, adj, *b).data_mut().iter_mut().zip(&diff) {
                    *x -= dd;
                }
            }
            Op::CosineRows(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let cols = va.cols();
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for r in 0..va.rows() {
                    cosine_grad(
                        va.row_slice(r),
                        vb.row_slice(r),
                        g.data()[r],
                        &mut da[r * cols..(r + 1) * cols],
                        &mut db[r * cols..(r + 1) * cols],
                    );
                }
                for (x, d) in acc(self, adj, *a).data_mut().iter_mut().zip(&da) {
                    *x += d;
                }
                for (x, d) in acc(self, adj, *b).data_mut().iter_mut().zip(&db) {
                    *x += d;
                }
            }
            Op::SegmentCosine { a, b, seg } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let [n, m] = va.shape();
                let seg = *seg;
                let mut da = vec![0.0; n * m];
                let mut db = vec![0.0; n];
                for s in 0..n / seg {
                    let bseg = &vb.data()[s * seg..(s + 1) * seg];
                    for col in 0..m {
                        let aseg: Vec<f64> = (0..seg).map(|t| va.get(s * seg + t, col)).collect();
                        let mut ga = vec![0.0; seg];
                        cosine_grad(
                            &aseg,
                            bseg,
                            g.get(s, col),
                            &mut ga,
                            &mut db[s * seg..(s + 1) * seg],
                        );
                        for (t, d) in ga.iter().enumerate() {
                            da[(s * seg + t) * m + col] += d;
                        }
                    }
                }
                for (x, d) in acc(self, adj, *a).data_mut().iter_mut().zip(&da) {
                    *x += d;
                }
                for (x, d) in acc(self, adj, *b).data_mut().iter_mut().zip(&db) {
                    *x += d;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = vq.cols();
                let dh = d / layout.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let t_len = layout.seq;
                let mut dq = vec![0.0; vq.len()];
                let mut dk = vec![0.0; vk.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; t_len];
                for b in 0..layout.batch {
                    for h in 0..layout.heads {
                        let off = h * dh;
                        for t in 0..t_len {
                            let qi = b * t_len + t;
                            let pbase = ((b * layout.heads + h) * t_len + t) * t_len;
                            let p = &probs[pbase..pbase + t_len];
                            let go = &g.row_slice(qi)[off..off + dh];
                            let mut dot = 0.0;
                            for s in 0..=t {
                                if p[s] == 0.0 {
                                    dp[s] = 0.0;
                                    continue;
                                }
                                let si = b * t_len + s;
                                let vrow = &vv.row_slice(si)[off..off + dh];
                                dp[s] = go.iter().zip(vrow).map(|(x, y)| x * y).sum();
                                dot += dp[s] * p[s];
                                for (x, gg) in dv[si * d + off..si * d + off + dh].iter_mut().zip(go) {
                                    *x += p[s] * gg;
                                }
                            }
                            for s in 0..=t {
                                if p[s] == 0.0 {
                                    continue;
                                }
                                let ds = p[s] * (dp[s] - dot) * scale;
                                let si = b * t_len + s;
                                let krow = &vk.row_slice(si)[off..off + dh];
                                let qrow = &vq.row_slice(qi)[off..off + dh];
                                for (x, kk) in dq[qi * d + off..qi * d + off + dh].iter_mut().zip(krow) {
                                    *x += ds * kk;
                                }
                                for (x, qq) in dk[si * d + off..si * d + off + dh].iter_mut().zip(qrow) {
                                    *x += ds * qq;
                                }
                            }
                        }
                    }
                }
                for (x, dd) in acc(self, adj, *q).data_mut().iter_mut().zip(&dq) {
                    *x += dd;
                }
                for (x, dd) in acc(self, adj, *k).data_mut().iter_mut().zip(&dk) {
                    *x += dd;
                }
                for (x, dd) in acc(self, adj, *v).data_mut().iter_mut().zip(&dv) {
                    *x += dd;
                }
            }
        }
    }

    /// Ids of all nodes `root` depends on (including itself).
    pub fn ancestors(&self, root: NodeId) -> Vec<NodeId> {
        let mut seen = vec![false; root.0 + 1];
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if seen[id.0] {
                continue;
            }
            seen[id.0] = true;
            stack.extend(self.nodes[id.0].parents());
        }
        seen.iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(i, _)| NodeId(i))
            .collect()
    }
}

fn acc<'a>(graph: &Graph, adj: &'a mut [Option<Tensor>], id: NodeId) -> &'a mut Tensor {
    adj[id.0].get_or_insert_with(|| {
        let [r, c] = graph.shape(id);
        Tensor::zeros(r, c)
    })
}

fn transpose(t: &Tensor) -> Tensor {
    let [r, c] = t.shape();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.get(i, j);
        }
    }
    Tensor::from_vec(c, r, out).expect("transpose shape")
}

/// Row-wise layer normalization without affine parameters; also returns
/// `1/sqrt(var + eps)` per row.
pub fn layernorm_rows(x: &Tensor) -> (Tensor, Vec<f64>) {
    let [rows, cols] = x.shape();
    let n = cols as f64;
    let mut out = Vec::with_capacity(rows * cols);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row_slice(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let s = 1.0 / (var + LAYERNORM_EPS).sqrt();
        inv_std.push(s);
        out.extend(row.iter().map(|v| (v - mean) * s));
    }
    (Tensor::from_vec(rows, cols, out).expect("layernorm shape"), inv_std)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let [rows, cols] = x.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = x.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    Tensor::from_vec(rows, cols, out).expect("softmax shape")
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn cosine_grad(a: &[f64], b: &[f64], g: f64, da: &mut [f64], db: &mut [f64]) {
    let na2: f64 = a.iter().map(|x| x * x).sum();
    let nb2: f64 = b.iter().map(|x| x * x).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        return;
    }
    let (na, nb) = (na2.sqrt(), nb2.sqrt());
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    for i in 0..a.len() {
        da[i] += g * (b[i] / (na * nb) - c * a[i] / na2);
        db[i] += g * (a[i] / (na * nb) - c * b[i] / nb2);
    }
}
