//! Minimal dense f64 tensor engine with reverse-mode autodiff.
//!
//! Computations are recorded on a [`Tape`]: every operation appends a node
//! holding its output value and the indices of its parents, so node ids are
//! already topologically ordered and [`Tape::backward`] is a single reverse
//! sweep. All tensors are two-dimensional (scalars are 1×1), stored row-major.
//!
//! Besides the usual dense ops, the engine provides the gather/concat and
//! segment-aggregation primitives message passing needs: messages live as a
//! `pairs × features` matrix and are reduced per target node with
//! [`Tape::segment_agg`] (max routes gradients to the winning row, ties to
//! the lowest row index; empty segments produce zero rows and no gradient).
//!
//! Training-facing composites (softmax cross-entropy over rows, logit BCE,
//! indexed MSE) are single nodes with analytic backward rules, which keeps
//! episode tapes short. Every op including the composites is covered by the
//! central-difference checker in [`gradcheck`].
//!
//! Named parameter collections live in a [`ParamStore`] (deterministically
//! ordered), which registers leaves onto a tape, applies SGD updates, and
//! serialises to the JSON checkpoint format
//! `{ name: { "shape": [rows, cols], "data": [...] } }`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: data length {len} does not fill a {rows}x{cols} tensor")]
    DataLength {
        op: &'static str,
        len: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar (1x1) loss, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("pointer loss: target {target} of row {row} is masked out")]
    MaskedTarget { row: usize, target: usize },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter {0:?} is frozen; updating it breaks the retraining contract")]
    FrozenParam(String),
    #[error("parameter {name:?}: gradient length {got} != {want}")]
    GradLength {
        name: String,
        got: usize,
        want: usize,
    },
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tid(usize);

/// Aggregation kind for [`Tape::segment_agg`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Agg {
    #[serde(rename = "max")]
    Max,
    #[serde(rename = "mean")]
    Mean,
    #[serde(rename = "sum")]
    Sum,
}

impl std::fmt::Display for Agg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Agg::Max => write!(f, "max"),
            Agg::Mean => write!(f, "mean"),
            Agg::Sum => write!(f, "sum"),
        }
    }
}

impl std::str::FromStr for Agg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "max" => Ok(Agg::Max),
            "mean" => Ok(Agg::Mean),
            "sum" => Ok(Agg::Sum),
            other => Err(format!("unknown aggregation {other:?}")),
        }
    }
}

enum Op {
    Leaf,
    Matmul(Tid, Tid),
    Add(Tid, Tid),
    /// Matrix plus a broadcast row vector.
    AddRow(Tid, Tid),
    Sub(Tid, Tid),
    Mul(Tid, Tid),
    Scale(Tid, f64),
    Relu(Tid),
    Tanh(Tid),
    Sigmoid(Tid),
    Transpose(Tid),
    /// Same data, different shape.
    Reshape(Tid),
    ConcatCols(Vec<Tid>),
    SliceCols(Tid, usize, usize),
    GatherRows(Tid, Vec<usize>),
    /// Rows `[nodes[src[k]] | nodes[dst[k]] | extra[k]]` per pair k.
    PairConcat {
        nodes: Tid,
        extra: Option<Tid>,
        src: Vec<usize>,
        dst: Vec<usize>,
    },
    /// `pair_concat(nodes, src, dst, extra) * w` evaluated block-wise so the
    /// pair-by-width input never materializes.
    PairLinear {
        nodes: Tid,
        extra: Option<Tid>,
        w: Tid,
        src: Vec<usize>,
        dst: Vec<usize>,
    },
    SegmentAgg {
        src: Tid,
        seg: Vec<usize>,
        kind: Agg,
        /// Winning source row per output cell (max only); usize::MAX marks
        /// an empty segment.
        winners: Vec<usize>,
        counts: Vec<usize>,
    },
    SumAll(Tid),
    /// Mean softmax cross-entropy over rows; `allowed` masks candidate
    /// columns (None = all allowed).
    PointerLoss {
        logits: Tid,
        targets: Vec<usize>,
        allowed: Option<Vec<bool>>,
    },
    /// Mean binary cross-entropy on logits.
    BceLoss { logits: Tid, labels: Vec<f64> },
    /// Mean squared error over selected flat indices of the prediction.
    MseIndexed {
        pred: Tid,
        indices: Vec<usize>,
        targets: Vec<f64>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for one reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, needs_grad: bool) -> Tid {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad: None,
            op,
            needs_grad,
        });
        Tid(self.nodes.len() - 1)
    }

    fn needs(&self, id: Tid) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn shape(&self, id: Tid) -> (usize, usize) {
        let node = &self.nodes[id.0];
        (node.rows, node.cols)
    }

    pub fn value(&self, id: Tid) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Gradient of the last backward sweep; `None` when the node did not
    /// require gradients (or backward has not run).
    pub fn grad(&self, id: Tid) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Scalar value of a 1x1 tensor.
    pub fn scalar(&self, id: Tid) -> Result<f64, TensorError> {
        let node = &self.nodes[id.0];
        if (node.rows, node.cols) != (1, 1) {
            return Err(TensorError::NotScalar((node.rows, node.cols)));
        }
        Ok(node.data[0])
    }

    // --- construction ----------------------------------------------------

    pub fn leaf(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        needs_grad: bool,
    ) -> Result<Tid, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                op: "leaf",
                len: data.len(),
                rows,
                cols,
            });
        }
        Ok(self.push(rows, cols, data, Op::Leaf, needs_grad))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Tid, TensorError> {
        self.leaf(rows, cols, data, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Tid {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf, false)
    }

    // --- dense ops ---------------------------------------------------------

    pub fn matmul(&mut self, a: Tid, b: Tid) -> Result<Tid, TensorError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: (m, k),
                rhs: (k2, n),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::Matmul(a, b), ng))
    }

    fn elementwise_binary(
        &mut self,
        op_name: &'static str,
        a: Tid,
        b: Tid,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tid, TensorError> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: (m, n),
                rhs: self.shape(b),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, data, op, ng))
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Result<Tid, TensorError> {
        self.elementwise_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Result<Tid, TensorError> {
        self.elementwise_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Result<Tid, TensorError> {
        self.elementwise_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a 1×n row vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Tid, row: Tid) -> Result<Tid, TensorError> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: (m, n),
                rhs: self.shape(row),
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        let r = &self.nodes[row.0].data;
        for chunk in data.chunks_exact_mut(n) {
            for (v, &rv) in chunk.iter_mut().zip(r) {
                *v += rv;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(m, n, data, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Tid, factor: f64) -> Result<Tid, TensorError> {
        let (m, n) = self.shape(a);
        let data = self.nodes[a.0].data.iter().map(|&x| x * factor).collect();
        let ng = self.needs(a);
        Ok(self.push(m, n, data, Op::Scale(a, factor), ng))
    }

    fn unary(&mut self, a: Tid, f: impl Fn(f64) -> f64, op: Op) -> Tid {
        let (m, n) = self.shape(a);
        let data = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let ng = self.needs(a);
        self.push(m, n, data, op, ng)
    }

    pub fn relu(&mut self, a: Tid) -> Tid {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Tid) -> Tid {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Tid) -> Tid {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn transpose(&mut self, a: Tid) -> Tid {
        let (m, n) = self.shape(a);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.needs(a);
        self.push(n, m, data, Op::Transpose(a), ng)
    }

    /// Reinterprets the row-major data under a new shape of equal size.
    pub fn reshape(&mut self, a: Tid, rows: usize, cols: usize) -> Result<Tid, TensorError> {
        let (m, n) = self.shape(a);
        if m * n != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: (m, n),
                rhs: (rows, cols),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let ng = self.needs(a);
        Ok(self.push(rows, cols, data, Op::Reshape(a), ng))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Tid]) -> Result<Tid, TensorError> {
        let (m, _) = self.shape(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: (m, 0),
                    rhs: (pm, pn),
                });
            }
            total += pn;
        }
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for &p in parts {
            let (_, pn) = self.shape(p);
            let src = &self.nodes[p.0].data;
            for i in 0..m {
                data[i * total + offset..i * total + offset + pn]
                    .copy_from_slice(&src[i * pn..(i + 1) * pn]);
            }
            offset += pn;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(m, total, data, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Copies columns `[from, to)`.
    pub fn slice_cols(&mut self, a: Tid, from: usize, to: usize) -> Result<Tid, TensorError> {
        let (m, n) = self.shape(a);
        if from > to || to > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: to,
                bound: n,
            });
        }
        let width = to - from;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; m * width];
        for i in 0..m {
            data[i * width..(i + 1) * width].copy_from_slice(&src[i * n + from..i * n + to]);
        }
        let ng = self.needs(a);
        Ok(self.push(m, width, data, Op::SliceCols(a, from, to), ng))
    }

    /// Selects rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: Tid, rows: &[usize]) -> Result<Tid, TensorError> {
        let (m, n) = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: m,
            });
        }
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; rows.len() * n];
        for (k, &r) in rows.iter().enumerate() {
            data[k * n..(k + 1) * n].copy_from_slice(&src[r * n..(r + 1) * n]);
        }
        let ng = self.needs(a);
        Ok(self.push(rows.len(), n, data, Op::GatherRows(a, rows.to_vec()), ng))
    }

    /// Builds per-pair message inputs `[nodes[src[k]] | nodes[dst[k]] |
    /// extra[k]]` in one node. `extra` must have one row per pair.
    pub fn pair_concat(
        &mut self,
        nodes: Tid,
        src: &[usize],
        dst: &[usize],
        extra: Option<Tid>,
    ) -> Result<Tid, TensorError> {
        let (m, n) = self.shape(nodes);
        if src.len() != dst.len() {
            return Err(TensorError::ShapeMismatch {
                op: "pair_concat",
                lhs: (src.len(), 1),
                rhs: (dst.len(), 1),
            });
        }
        if let Some(&bad) = src.iter().chain(dst.iter()).find(|&&r| r >= m) {
            return Err(TensorError::IndexOutOfRange {
                op: "pair_concat",
                index: bad,
                bound: m,
            });
        }
        let pairs = src.len();
        let extra_cols = match extra {
            Some(e) => {
                let (em, en) = self.shape(e);
                if em != pairs {
                    return Err(TensorError::ShapeMismatch {
                        op: "pair_concat",
                        lhs: (pairs, 0),
                        rhs: (em, en),
                    });
                }
                en
            }
            None => 0,
        };
        let width = 2 * n + extra_cols;
        let mut data = vec![0.0; pairs * width];
        {
            let node_data = &self.nodes[nodes.0].data;
            for k in 0..pairs {
                let row = &mut data[k * width..(k + 1) * width];
                row[..n].copy_from_slice(&node_data[src[k] * n..(src[k] + 1) * n]);
                row[n..2 * n].copy_from_slice(&node_data[dst[k] * n..(dst[k] + 1) * n]);
            }
        }
        if let Some(e) = extra {
            let extra_data = &self.nodes[e.0].data;
            for k in 0..pairs {
                data[k * width + 2 * n..(k + 1) * width]
                    .copy_from_slice(&extra_data[k * extra_cols..(k + 1) * extra_cols]);
            }
        }
        let ng = self.needs(nodes) || extra.map(|e| self.needs(e)).unwrap_or(false);
        Ok(self.push(
            pairs,
            width,
            data,
            Op::PairConcat {
                nodes,
                extra,
                src: src.to_vec(),
                dst: dst.to_vec(),
            },
            ng,
        ))
    }

    /// Computes `pair_concat(nodes, src, dst, extra) * w` without building the
    /// concatenated rows: `w` splits row-wise into a source block, a
    /// destination block (each `nodes.cols` rows), and an extra block, and each
    /// node is projected once through the first two blocks before the per-pair
    /// gather. Same function as the concat-then-matmul pair, with cost
    /// `nodes + pairs` row projections instead of `pairs` wide ones; the
    /// floating-point summation order differs from the unfused form.
    pub fn pair_linear(
        &mut self,
        nodes: Tid,
        src: &[usize],
        dst: &[usize],
        extra: Option<Tid>,
        w: Tid,
    ) -> Result<Tid, TensorError> {
        let (m, n) = self.shape(nodes);
        if src.len() != dst.len() {
            return Err(TensorError::ShapeMismatch {
                op: "pair_linear",
                lhs: (src.len(), 1),
                rhs: (dst.len(), 1),
            });
        }
        if let Some(&bad) = src.iter().chain(dst.iter()).find(|&&r| r >= m) {
            return Err(TensorError::IndexOutOfRange {
                op: "pair_linear",
                index: bad,
                bound: m,
            });
        }
        let pairs = src.len();
        let extra_cols = match extra {
            Some(e) => {
                let (em, en) = self.shape(e);
                if em != pairs {
                    return Err(TensorError::ShapeMismatch {
                        op: "pair_linear",
                        lhs: (pairs, 0),
                        rhs: (em, en),
                    });
                }
                en
            }
            None => 0,
        };
        let (wr, h) = self.shape(w);
        if wr != 2 * n + extra_cols {
            return Err(TensorError::ShapeMismatch {
                op: "pair_linear",
                lhs: (pairs, 2 * n + extra_cols),
                rhs: (wr, h),
            });
        }
        let w_data = &self.nodes[w.0].data;
        let node_data = &self.nodes[nodes.0].data;
        // Blocks of w are contiguous in row-major order.
        let mut src_proj = vec![0.0; m * h];
        let mut dst_proj = vec![0.0; m * h];
        matmul_into(node_data, &w_data[..n * h], &mut src_proj, m, n, h);
        matmul_into(node_data, &w_data[n * h..2 * n * h], &mut dst_proj, m, n, h);
        let mut data = vec![0.0; pairs * h];
        if let Some(e) = extra {
            let extra_data = &self.nodes[e.0].data;
            matmul_into(
                extra_data,
                &w_data[2 * n * h..],
                &mut data,
                pairs,
                extra_cols,
                h,
            );
        }
        for k in 0..pairs {
            let row = &mut data[k * h..(k + 1) * h];
            let su = &src_proj[src[k] * h..(src[k] + 1) * h];
            let sv = &dst_proj[dst[k] * h..(dst[k] + 1) * h];
            for ((o, &u), &v) in row.iter_mut().zip(su).zip(sv) {
                *o += u + v;
            }
        }
        let ng =
            self.needs(nodes) || self.needs(w) || extra.map(|e| self.needs(e)).unwrap_or(false);
        Ok(self.push(
            pairs,
            h,
            data,
            Op::PairLinear {
                nodes,
                extra,
                w,
                src: src.to_vec(),
                dst: dst.to_vec(),
            },
            ng,
        ))
    }

    /// Reduces message rows into `segments` output rows: row k of `src`
    /// contributes to output row `seg[k]`. Sum and mean accumulate in
    /// ascending row order; max records the winning row per cell for
    /// backward, breaking ties towards the lowest row index. Segments with
    /// no contributing rows yield zero rows (and route no gradient).
    pub fn segment_agg(
        &mut self,
        src: Tid,
        seg: &[usize],
        segments: usize,
        kind: Agg,
    ) -> Result<Tid, TensorError> {
        let (m, n) = self.shape(src);
        if seg.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "segment_agg",
                lhs: (m, n),
                rhs: (seg.len(), 1),
            });
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= segments) {
            return Err(TensorError::IndexOutOfRange {
                op: "segment_agg",
                index: bad,
                bound: segments,
            });
        }
        let src_data = &self.nodes[src.0].data;
        let mut counts = vec![0usize; segments];
        for &s in seg {
            counts[s] += 1;
        }
        let mut data = vec![0.0; segments * n];
        let mut winners = Vec::new();
        match kind {
            Agg::Sum | Agg::Mean => {
                for (k, &s) in seg.iter().enumerate() {
                    let row = &src_data[k * n..(k + 1) * n];
                    let out = &mut data[s * n..(s + 1) * n];
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                if kind == Agg::Mean {
                    for s in 0..segments {
                        if counts[s] > 0 {
                            let inv = 1.0 / counts[s] as f64;
                            for v in &mut data[s * n..(s + 1) * n] {
                                *v *= inv;
                            }
                        }
                    }
                }
            }
            Agg::Max => {
                winners = vec![usize::MAX; segments * n];
                for (k, &s) in seg.iter().enumerate() {
                    let row = &src_data[k * n..(k + 1) * n];
                    for (j, &v) in row.iter().enumerate() {
                        let cell = s * n + j;
                        if winners[cell] == usize::MAX || v > data[cell] {
                            data[cell] = v;
                            winners[cell] = k;
                        }
                    }
                }
            }
        }
        let ng = self.needs(src);
        Ok(self.push(
            segments,
            n,
            data,
            Op::SegmentAgg {
                src,
                seg: seg.to_vec(),
                kind,
                winners,
                counts,
            },
            ng,
        ))
    }

    pub fn sum_all(&mut self, a: Tid) -> Tid {
        let total: f64 = self.nodes[a.0].data.iter().sum();
        let ng = self.needs(a);
        self.push(1, 1, vec![total], Op::SumAll(a), ng)
    }

    // --- loss composites ----------------------------------------------------

    /// Mean categorical cross-entropy of row-wise softmax against integer
    /// targets. `allowed` (same shape as `logits`, flattened) masks
    /// candidate columns as if their logits were -inf; the target of every
    /// row must stay allowed.
    pub fn pointer_loss(
        &mut self,
        logits: Tid,
        targets: &[usize],
        allowed: Option<&[bool]>,
    ) -> Result<Tid, TensorError> {
        let (m, n) = self.shape(logits);
        if targets.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "pointer_loss",
                lhs: (m, n),
                rhs: (targets.len(), 1),
            });
        }
        if let Some(mask) = allowed {
            if mask.len() != m * n {
                return Err(TensorError::ShapeMismatch {
                    op: "pointer_loss",
                    lhs: (m, n),
                    rhs: (mask.len(), 1),
                });
            }
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "pointer_loss",
                index: bad,
                bound: n,
            });
        }
        let data = &self.nodes[logits.0].data;
        let is_allowed = |row: usize, col: usize| allowed.map_or(true, |m| m[row * n + col]);
        let mut total = 0.0;
        for (row, &target) in targets.iter().enumerate() {
            if !is_allowed(row, target) {
                return Err(TensorError::MaskedTarget { row, target });
            }
            let lse = log_sum_exp_row(&data[row * n..(row + 1) * n], |col| is_allowed(row, col));
            total += lse - data[row * n + target];
        }
        let ng = self.needs(logits);
        Ok(self.push(
            1,
            1,
            vec![total / m as f64],
            Op::PointerLoss {
                logits,
                targets: targets.to_vec(),
                allowed: allowed.map(|m| m.to_vec()),
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy of element-wise sigmoids against labels,
    /// computed in the numerically stable logit form.
    pub fn bce_loss(&mut self, logits: Tid, labels: &[f64]) -> Result<Tid, TensorError> {
        let (m, n) = self.shape(logits);
        if labels.len() != m * n {
            return Err(TensorError::ShapeMismatch {
                op: "bce_loss",
                lhs: (m, n),
                rhs: (labels.len(), 1),
            });
        }
        let data = &self.nodes[logits.0].data;
        let total: f64 = data
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let ng = self.needs(logits);
        Ok(self.push(
            1,
            1,
            vec![total / labels.len() as f64],
            Op::BceLoss {
                logits,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Mean squared error over selected flat indices of `pred`.
    pub fn mse_indexed(
        &mut self,
        pred: Tid,
        indices: &[usize],
        targets: &[f64],
    ) -> Result<Tid, TensorError> {
        let (m, n) = self.shape(pred);
        if indices.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "mse_indexed",
                lhs: (indices.len(), 1),
                rhs: (targets.len(), 1),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m * n) {
            return Err(TensorError::IndexOutOfRange {
                op: "mse_indexed",
                index: bad,
                bound: m * n,
            });
        }
        let data = &self.nodes[pred.0].data;
        let total: f64 = indices
            .iter()
            .zip(targets)
            .map(|(&i, &t)| {
                let d = data[i] - t;
                d * d
            })
            .sum();
        let count = indices.len().max(1) as f64;
        let ng = self.needs(pred);
        Ok(self.push(
            1,
            1,
            vec![total / count],
            Op::MseIndexed {
                pred,
                indices: indices.to_vec(),
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    // --- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients of every
    /// gradient-requiring node become available through [`Tape::grad`].
    pub fn backward(&mut self, loss: Tid) -> Result<(), TensorError> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(TensorError::NotScalar((r, c)));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: Tid) -> &mut Vec<f64> {
        let len = self.nodes[id.0].rows * self.nodes[id.0].cols;
        self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&mut self, idx: usize) {
        let out_grad = self.nodes[idx].grad.take().expect("gradient present");
        // Re-install immediately; taking avoids aliasing while we write into
        // parent buffers.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.shape(*a);
                let (_, n) = self.shape(*b);
                if self.needs(*a) {
                    let b_data = self.nodes[b.0].data.clone();
                    let ga = self.grad_buf(*a);
                    // dA = dC * B^T
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            let gr = &out_grad[i * n..(i + 1) * n];
                            let br = &b_data[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                acc += gr[j] * br[j];
                            }
                            ga[i * k + kk] += acc;
                        }
                    }
                }
                if self.needs(*b) {
                    let a_data = self.nodes[a.0].data.clone();
                    let gb = self.grad_buf(*b);
                    // dB = A^T * dC
                    for i in 0..m {
                        let gr = &out_grad[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let av = a_data[i * k + kk];
                            if av != 0.0 {
                                let row = &mut gb[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    row[j] += av * gr[j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if self.needs(p) {
                        accumulate(self.grad_buf(p), &out_grad);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    accumulate(self.grad_buf(*a), &out_grad);
                }
                if self.needs(*row) {
                    let n = self.nodes[row.0].cols;
                    let gr = self.grad_buf(*row);
                    for chunk in out_grad.chunks_exact(n) {
                        for (g, &v) in gr.iter_mut().zip(chunk) {
                            *g += v;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(self.grad_buf(*a), &out_grad);
                }
                if self.needs(*b) {
                    let gb = self.grad_buf(*b);
                    for (g, &v) in gb.iter_mut().zip(&out_grad) {
                        *g -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let other = self.nodes[b.0].data.clone();
                    let ga = self.grad_buf(*a);
                    for ((g, &v), &o) in ga.iter_mut().zip(&out_grad).zip(&other) {
                        *g += v * o;
                    }
                }
                if self.needs(*b) {
                    let other = self.nodes[a.0].data.clone();
                    let gb = self.grad_buf(*b);
                    for ((g, &v), &o) in gb.iter_mut().zip(&out_grad).zip(&other) {
                        *g += v * o;
                    }
                }
            }
            Op::Scale(a, factor) => {
                if self.needs(*a) {
                    let f = *factor;
                    let ga = self.grad_buf(*a);
                    for (g, &v) in ga.iter_mut().zip(&out_grad) {
                        *g += v * f;
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let vals = self.nodes[a.0].data.clone();
                    let ga = self.grad_buf(*a);
                    for ((g, &v), &x) in ga.iter_mut().zip(&out_grad).zip(&vals) {
                        if x > 0.0 {
                            *g += v;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let out = self.nodes[idx].data.clone();
                    let ga = self.grad_buf(*a);
                    for ((g, &v), &y) in ga.iter_mut().zip(&out_grad).zip(&out) {
                        *g += v * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let out = self.nodes[idx].data.clone();
                    let ga = self.grad_buf(*a);
                    for ((g, &v), &y) in ga.iter_mut().zip(&out_grad).zip(&out) {
                        *g += v * y * (1.0 - y);
                    }
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (m, n) = self.shape(*a);
                    let ga = self.grad_buf(*a);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += out_grad[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    accumulate(self.grad_buf(*a), &out_grad);
                }
            }
            Op::ConcatCols(parts) => {
                let total: usize = self.nodes[idx].cols;
                let rows = self.nodes[idx].rows;
                let mut offset = 0;
                for &p in parts {
                    let (_, pn) = self.shape(p);
                    if self.needs(p) {
                        let gp = self.grad_buf(p);
                        for i in 0..rows {
                            for j in 0..pn {
                                gp[i * pn + j] += out_grad[i * total + offset + j];
                            }
                        }
                    }
                    offset += pn;
                }
            }
            Op::SliceCols(a, from, _to) => {
                if self.needs(*a) {
                    let (m, n) = self.shape(*a);
                    let width = self.nodes[idx].cols;
                    let ga = self.grad_buf(*a);
                    for i in 0..m {
                        for j in 0..width {
                            ga[i * n + from + j] += out_grad[i * width + j];
                        }
                    }
                }
            }
            Op::GatherRows(a, rows) => {
                if self.needs(*a) {
                    let n = self.nodes[idx].cols;
                    let ga = self.grad_buf(*a);
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            ga[r * n + j] += out_grad[k * n + j];
                        }
                    }
                }
            }
            Op::PairConcat {
                nodes,
                extra,
                src,
                dst,
            } => {
                let width = self.nodes[idx].cols;
                let n = self.nodes[nodes.0].cols;
                if self.needs(*nodes) {
                    let gn = self.grad_buf(*nodes);
                    for k in 0..src.len() {
                        let row = &out_grad[k * width..(k + 1) * width];
                        for j in 0..n {
                            gn[src[k] * n + j] += row[j];
                            gn[dst[k] * n + j] += row[n + j];
                        }
                    }
                }
                if let Some(e) = extra {
                    if self.needs(*e) {
                        let en = self.nodes[e.0].cols;
                        let ge = self.grad_buf(*e);
                        for k in 0..src.len() {
                            let row = &out_grad[k * width + 2 * n..(k + 1) * width];
                            for j in 0..en {
                                ge[k * en + j] += row[j];
                            }
                        }
                    }
                }
            }
            Op::PairLinear {
                nodes,
                extra,
                w,
                src,
                dst,
            } => {
                let h = self.nodes[idx].cols;
                let (m, n) = self.shape(*nodes);
                let extra_cols = extra.map(|e| self.nodes[e.0].cols).unwrap_or(0);
                // Pair gradients scattered onto each endpoint (ascending pair
                // order); these drive both the node and the weight gradients.
                let mut src_sum = vec![0.0; m * h];
                let mut dst_sum = vec![0.0; m * h];
                for k in 0..src.len() {
                    let g = &out_grad[k * h..(k + 1) * h];
                    let su = &mut src_sum[src[k] * h..(src[k] + 1) * h];
                    for (o, &v) in su.iter_mut().zip(g) {
                        *o += v;
                    }
                    let sv = &mut dst_sum[dst[k] * h..(dst[k] + 1) * h];
                    for (o, &v) in sv.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if self.needs(*nodes) {
                    let w_data = self.nodes[w.0].data.clone();
                    let gn = self.grad_buf(*nodes);
                    // dNodes = src_sum * Wsrc^T + dst_sum * Wdst^T
                    for i in 0..m {
                        let gu = &src_sum[i * h..(i + 1) * h];
                        let gv = &dst_sum[i * h..(i + 1) * h];
                        for c in 0..n {
                            let wu = &w_data[c * h..(c + 1) * h];
                            let wv = &w_data[(n + c) * h..(n + c + 1) * h];
                            let mut acc = 0.0;
                            for j in 0..h {
                                acc += gu[j] * wu[j] + gv[j] * wv[j];
                            }
                            gn[i * n + c] += acc;
                        }
                    }
                }
                if self.needs(*w) {
                    let node_data = self.nodes[nodes.0].data.clone();
                    let extra_data = extra.map(|e| self.nodes[e.0].data.clone());
                    let gw = self.grad_buf(*w);
                    // dWsrc = nodes^T * src_sum, dWdst = nodes^T * dst_sum
                    for i in 0..m {
                        let gu = &src_sum[i * h..(i + 1) * h];
                        let gv = &dst_sum[i * h..(i + 1) * h];
                        for c in 0..n {
                            let nv = node_data[i * n + c];
                            if nv != 0.0 {
                                let row = &mut gw[c * h..(c + 1) * h];
                                for (o, &g) in row.iter_mut().zip(gu) {
                                    *o += nv * g;
                                }
                                let row = &mut gw[(n + c) * h..(n + c + 1) * h];
                                for (o, &g) in row.iter_mut().zip(gv) {
                                    *o += nv * g;
                                }
                            }
                        }
                    }
                    if let Some(ed) = &extra_data {
                        // dWextra = extra^T * out_grad
                        for k in 0..src.len() {
                            let g = &out_grad[k * h..(k + 1) * h];
                            for c in 0..extra_cols {
                                let ev = ed[k * extra_cols + c];
                                if ev != 0.0 {
                                    let row =
                                        &mut gw[(2 * n + c) * h..(2 * n + c + 1) * h];
                                    for (o, &gg) in row.iter_mut().zip(g) {
                                        *o += ev * gg;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(e) = extra {
                    if self.needs(*e) {
                        let w_data = self.nodes[w.0].data.clone();
                        let ge = self.grad_buf(*e);
                        // dExtra = out_grad * Wextra^T
                        for k in 0..src.len() {
                            let g = &out_grad[k * h..(k + 1) * h];
                            for c in 0..extra_cols {
                                let wrow = &w_data[(2 * n + c) * h..(2 * n + c + 1) * h];
                                let mut acc = 0.0;
                                for j in 0..h {
                                    acc += g[j] * wrow[j];
                                }
                                ge[k * extra_cols + c] += acc;
                            }
                        }
                    }
                }
            }
            Op::SegmentAgg {
                src,
                seg,
                kind,
                winners,
                counts,
            } => {
                if self.needs(*src) {
                    let n = self.nodes[idx].cols;
                    let gs = self.grad_buf(*src);
                    match kind {
                        Agg::Sum => {
                            for (k, &s) in seg.iter().enumerate() {
                                for j in 0..n {
                                    gs[k * n + j] += out_grad[s * n + j];
                                }
                            }
                        }
                        Agg::Mean => {
                            for (k, &s) in seg.iter().enumerate() {
                                let inv = 1.0 / counts[s] as f64;
                                for j in 0..n {
                                    gs[k * n + j] += out_grad[s * n + j] * inv;
                                }
                            }
                        }
                        Agg::Max => {
                            for (cell, &winner) in winners.iter().enumerate() {
                                if winner != usize::MAX {
                                    let j = cell % n;
                                    gs[winner * n + j] += out_grad[cell];
                                }
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let g = out_grad[0];
                    let ga = self.grad_buf(*a);
                    for v in ga.iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::PointerLoss {
                logits,
                targets,
                allowed,
            } => {
                if self.needs(*logits) {
                    let (m, n) = self.shape(*logits);
                    let data = self.nodes[logits.0].data.clone();
                    let scale = out_grad[0] / m as f64;
                    let gl = self.grad_buf(*logits);
                    for (row, &target) in targets.iter().enumerate() {
                        let is_allowed =
                            |col: usize| allowed.as_ref().map_or(true, |a| a[row * n + col]);
                        let lse = log_sum_exp_row(&data[row * n..(row + 1) * n], is_allowed);
                        for col in 0..n {
                            if !is_allowed(col) {
                                continue;
                            }
                            let softmax = (data[row * n + col] - lse).exp();
                            let indicator = if col == target { 1.0 } else { 0.0 };
                            gl[row * n + col] += scale * (softmax - indicator);
                        }
                    }
                }
            }
            Op::BceLoss { logits, labels } => {
                if self.needs(*logits) {
                    let data = self.nodes[logits.0].data.clone();
                    let scale = out_grad[0] / labels.len() as f64;
                    let gl = self.grad_buf(*logits);
                    for ((g, &z), &y) in gl.iter_mut().zip(&data).zip(labels) {
                        *g += scale * (sigmoid(z) - y);
                    }
                }
            }
            Op::MseIndexed {
                pred,
                indices,
                targets,
            } => {
                if self.needs(*pred) {
                    let data = self.nodes[pred.0].data.clone();
                    let scale = 2.0 * out_grad[0] / indices.len().max(1) as f64;
                    let gp = self.grad_buf(*pred);
                    for (&i, &t) in indices.iter().zip(targets) {
                        gp[i] += scale * (data[i] - t);
                    }
                }
            }
        }
        self.nodes[idx].op = op;
        self.nodes[idx].grad = Some(out_grad);
    }
}

fn accumulate(grad: &mut [f64], delta: &[f64]) {
    for (g, &d) in grad.iter_mut().zip(delta) {
        *g += d;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sum(exp(row[allowed]))) with the usual max shift; requires at least
/// one allowed entry. Non-finite logits yield NaN so a diverged model
/// surfaces as a non-finite loss rather than a panic.
fn log_sum_exp_row(row: &[f64], is_allowed: impl Fn(usize) -> bool) -> f64 {
    let mut hi = f64::NEG_INFINITY;
    let mut any = false;
    for (col, &v) in row.iter().enumerate() {
        if is_allowed(col) {
            any = true;
            if v.is_nan() {
                return f64::NAN;
            }
            if v > hi {
                hi = v;
            }
        }
    }
    debug_assert!(any, "softmax row with no allowed entries");
    let mut sum = 0.0;
    for (col, &v) in row.iter().enumerate() {
        if is_allowed(col) {
            sum += (v - hi).exp();
        }
    }
    hi + sum.ln()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

// --- parameters & checkpoints ---------------------------------------------------

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: (usize, usize),
    pub data: Vec<f64>,
}

/// Deterministically ordered collection of named parameters.
///
/// Parameters marked frozen are registered on tapes without gradient
/// tracking and refuse SGD updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    frozen: std::collections::BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) {
        debug_assert_eq!(data.len(), rows * cols, "parameter {name}");
        self.params.insert(
            name.to_string(),
            Param {
                shape: (rows, cols),
                data,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Marks every parameter except `keep_trainable` as frozen.
    pub fn freeze_except(&mut self, keep_trainable: &[&str]) {
        self.frozen = self
            .params
            .keys()
            .filter(|name| !keep_trainable.contains(&name.as_str()))
            .cloned()
            .collect();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Registers every parameter as a tape leaf. Frozen parameters never
    /// track gradients; `with_grads: false` disables tracking entirely (for
    /// inference tapes).
    pub fn register(
        &self,
        tape: &mut Tape,
        with_grads: bool,
    ) -> Result<BTreeMap<String, Tid>, TensorError> {
        let mut ids = BTreeMap::new();
        for (name, param) in &self.params {
            let needs = with_grads && !self.frozen.contains(name);
            let id = tape.leaf(param.shape.0, param.shape.1, param.data.clone(), needs)?;
            ids.insert(name.clone(), id);
        }
        Ok(ids)
    }

    /// Collects gradients for all trainable parameters after a backward
    /// sweep. Parameters whose gradient never materialised (not touched by
    /// the loss) are skipped.
    pub fn collect_grads(
        &self,
        tape: &Tape,
        ids: &BTreeMap<String, Tid>,
    ) -> BTreeMap<String, Vec<f64>> {
        let mut grads = BTreeMap::new();
        for (name, &id) in ids {
            if self.frozen.contains(name) {
                continue;
            }
            if let Some(g) = tape.grad(id) {
                grads.insert(name.clone(), g.to_vec());
            }
        }
        grads
    }

    /// One SGD step with decoupled L2: `p <- p - lr * (g + wd * p)`.
    ///
    /// Rejects gradients for unknown or frozen parameters.
    pub fn sgd_step(
        &mut self,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<(), TensorError> {
        for (name, grad) in grads {
            if self.frozen.contains(name) {
                return Err(TensorError::FrozenParam(name.clone()));
            }
            let param = self
                .params
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if grad.len() != param.data.len() {
                return Err(TensorError::GradLength {
                    name: name.clone(),
                    got: grad.len(),
                    want: param.data.len(),
                });
            }
            for (p, &g) in param.data.iter_mut().zip(grad) {
                *p -= lr * (g + weight_decay * *p);
            }
        }
        Ok(())
    }

    // Checkpoint payload: { name: { "shape": [rows, cols], "data": [...] } }.

    pub fn to_json_value(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (name, param) in &self.params {
            map.insert(
                name.clone(),
                serde_json::json!({
                    "shape": [param.shape.0, param.shape.1],
                    "data": param.data,
                }),
            );
        }
        serde_json::Value::Object(map)
    }

    pub fn from_json_value(value: &serde_json::Value) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        struct ParamRepr {
            shape: (usize, usize),
            data: Vec<f64>,
        }
        let reprs: BTreeMap<String, ParamRepr> = serde_json::from_value(value.clone())?;
        let mut store = ParamStore::new();
        for (name, repr) in reprs {
            store.insert(&name, repr.shape.0, repr.shape.1, repr.data);
        }
        Ok(store)
    }
}

// --- gradient checking -----------------------------------------------------------

pub mod gradcheck {
    //! Central-difference gradient verification.
    //!
    //! A scalar-valued builder is evaluated on a fresh tape per probe; the
    //! analytic gradient from one backward sweep is compared against
    //! `(f(x+h) - f(x-h)) / 2h` per input element.

    use super::{Tape, TensorError, Tid};

    /// Default perturbation step.
    pub const STEP: f64 = 1e-4;
    /// Default relative-error bound.
    pub const TOLERANCE: f64 = 1e-4;

    /// Input tensors handed to a gradcheck builder.
    pub struct Inputs {
        pub shapes: Vec<(usize, usize)>,
        pub values: Vec<Vec<f64>>,
    }

    impl Inputs {
        pub fn new(shapes: Vec<(usize, usize)>, values: Vec<Vec<f64>>) -> Self {
            assert_eq!(shapes.len(), values.len());
            Inputs { shapes, values }
        }
    }

    fn eval(
        inputs: &Inputs,
        build: &impl Fn(&mut Tape, &[Tid]) -> Result<Tid, TensorError>,
        with_grads: bool,
    ) -> Result<(Tape, Vec<Tid>, Tid), TensorError> {
        let mut tape = Tape::new();
        let mut ids = Vec::new();
        for (shape, value) in inputs.shapes.iter().zip(&inputs.values) {
            ids.push(tape.leaf(shape.0, shape.1, value.clone(), with_grads)?);
        }
        let loss = build(&mut tape, &ids)?;
        Ok((tape, ids, loss))
    }

    /// Returns the maximum relative error between analytic and
    /// central-difference gradients over all input elements.
    ///
    /// The relative error of a pair `(a, n)` is `|a - n| / max(1, |a|, |n|)`,
    /// so near-zero gradients are compared absolutely.
    pub fn max_relative_error(
        inputs: &Inputs,
        build: impl Fn(&mut Tape, &[Tid]) -> Result<Tid, TensorError>,
        step: f64,
    ) -> Result<f64, TensorError> {
        let (mut tape, ids, loss) = eval(inputs, &build, true)?;
        tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| {
                let (r, c) = tape.shape(id);
                vec![0.0; r * c]
            }))
            .collect();
        let mut worst = 0.0f64;
        let mut probe = Inputs {
            shapes: inputs.shapes.clone(),
            values: inputs.values.clone(),
        };
        for which in 0..inputs.values.len() {
            for elem in 0..inputs.values[which].len() {
                let original = probe.values[which][elem];
                probe.values[which][elem] = original + step;
                let (tape_hi, _, loss_hi) = eval(&probe, &build, false)?;
                let hi = tape_hi.scalar(loss_hi)?;
                probe.values[which][elem] = original - step;
                let (tape_lo, _, loss_lo) = eval(&probe, &build, false)?;
                let lo = tape_lo.scalar(loss_lo)?;
                probe.values[which][elem] = original;
                let numeric = (hi - lo) / (2.0 * step);
                let a = analytic[which][elem];
                let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }
}
