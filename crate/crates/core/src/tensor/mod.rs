//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles. Calling
//! [`Tape::backward`] walks the record in exact reverse order and accumulates
//! gradients into every leaf that requires them. Values are row-major `rows×cols`
//! matrices; scalars are `1×1`.

mod adam;
pub mod kernels;

use std::sync::Arc;

pub use adam::{Adam, AdamConfig};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward requires a 1x1 loss, got {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for {len} rows in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("segment ids must be non-decreasing")]
    UnsortedSegments,
    #[error("tensor of rank {0} cannot be placed on a tape (rank 2 required)")]
    UnsupportedRank(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Owned parameter or data tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Partition of `0..len` into contiguous runs, built from non-decreasing ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_ids(ids: &[usize], n_segments: usize) -> Result<Self> {
        let mut offsets = vec![0usize; n_segments + 1];
        let mut prev = 0;
        for &id in ids {
            if id < prev {
                return Err(TensorError::UnsortedSegments);
            }
            if id >= n_segments {
                return Err(TensorError::IndexOutOfRange {
                    op: "segments",
                    index: id,
                    len: n_segments,
                });
            }
            prev = id;
            offsets[id + 1] += 1;
        }
        for s in 0..n_segments {
            offsets[s + 1] += offsets[s];
        }
        Ok(Self { offsets })
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

/// Row-grouped sparse structure for weighted aggregation: entry `e` maps
/// column `cols[e]` into row `rows[e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePattern {
    n_cols: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    segments: Segments,
}

impl SparsePattern {
    pub fn new(n_rows: usize, n_cols: usize, rows: Vec<usize>, cols: Vec<usize>) -> Result<Self> {
        if rows.len() != cols.len() {
            return Err(TensorError::ShapeMismatch {
                op: "sparse_pattern",
                left: vec![rows.len()],
                right: vec![cols.len()],
            });
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= n_cols) {
            return Err(TensorError::IndexOutOfRange {
                op: "sparse_pattern",
                index: c,
                len: n_cols,
            });
        }
        let segments = Segments::from_ids(&rows, n_rows)?;
        Ok(Self {
            n_cols,
            rows,
            cols,
            segments,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.segments.count()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    pub fn segments(&self) -> &Segments {
        &self.segments
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softplus,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>, Axis),
    Slice { src: Var, axis: Axis, start: usize },
    GatherRows { src: Var, idx: Arc<[usize]> },
    ScatterAddRows { src: Var, idx: Arc<[usize]> },
    Unary(Unary, Var),
    SegmentSoftmax { src: Var, segments: Arc<Segments> },
    Sum(Var),
    Mean(Var),
    Spmm { weights: Var, x: Var, pattern: Arc<SparsePattern> },
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Persistent accumulator, only used for leaves.
    grad: Option<Vec<f64>>,
}

/// Test hook that corrupts one backward rule, used as a negative control for
/// gradient checking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    /// Multiplies the matmul backward rule by `1 + eps`.
    ScaleMatmulBackward(f64),
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
    fault: Option<Fault>,
}

fn shape_of(n: &Node) -> Vec<usize> {
    vec![n.rows, n.cols]
}

/// How `b` broadcasts against `a` in binary elementwise ops.
#[derive(Debug, Clone, Copy)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            fault,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by matmul and spmm so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Places a tensor on the tape. It becomes a gradient-receiving leaf when
    /// the tensor requires grad, otherwise a constant.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        if t.shape.len() != 2 {
            return Err(TensorError::UnsupportedRank(t.shape.len()));
        }
        let op = if t.requires_grad { Op::Leaf } else { Op::Const };
        Ok(self.push(t.shape[0], t.shape[1], t.data.clone(), op, t.requires_grad))
    }

    /// Gradient-receiving leaf from raw values.
    pub fn param(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "param",
                left: vec![rows, cols],
                right: vec![value.len()],
            });
        }
        Ok(self.push(rows, cols, value, Op::Leaf, true))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "constant",
                left: vec![rows, cols],
                right: vec![value.len()],
            });
        }
        Ok(self.push(rows, cols, value, Op::Const, false))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(1, 1, vec![x], Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Copies a value out as an owned tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: vec![n.rows, n.cols],
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar == br && ac == bc {
            Ok(Bcast::Same)
        } else if br == 1 && bc == ac {
            Ok(Bcast::Row)
        } else if bc == 1 && br == ar {
            Ok(Bcast::Col)
        } else if br == 1 && bc == 1 {
            Ok(Bcast::Scalar)
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                left: vec![ar, ac],
                right: vec![br, bc],
            })
        }
    }

    fn bidx(mode: Bcast, i: usize, cols: usize) -> usize {
        match mode {
            Bcast::Same => i,
            Bcast::Row => i % cols,
            Bcast::Col => i / cols,
            Bcast::Scalar => 0,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        self.macs += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, value, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum; `b` may broadcast as a row, a column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast("add", a, b)?;
        let (r, c) = self.shape(a);
        let bv = self.value(b);
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[Self::bidx(mode, i, c)])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast("mul", a, b)?;
        let (r, c) = self.shape(a);
        let bv = self.value(b);
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[Self::bidx(mode, i, c)])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let value = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push(r, c, value, Op::Scale(a, s), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::ShapeMismatch {
            op: "concat",
            left: vec![],
            right: vec![],
        })?;
        let (r0, c0) = self.shape(first);
        for &p in &parts[1..] {
            let (r, c) = self.shape(p);
            let ok = match axis {
                Axis::Rows => c == c0,
                Axis::Cols => r == r0,
            };
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: vec![r0, c0],
                    right: vec![r, c],
                });
            }
        }
        let (rows, cols, value) = match axis {
            Axis::Rows => {
                let rows = parts.iter().map(|&p| self.shape(p).0).sum();
                let mut value = Vec::with_capacity(rows * c0);
                for &p in parts {
                    value.extend_from_slice(self.value(p));
                }
                (rows, c0, value)
            }
            Axis::Cols => {
                let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
                let mut value = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        let c = self.shape(p).1;
                        value.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                    }
                }
                (r0, cols, value)
            }
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(rows, cols, value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Contiguous block of `len` rows or columns starting at `start`.
    pub fn slice(&mut self, src: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(src);
        let limit = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if start + len > limit {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                len: limit,
            });
        }
        let sv = self.value(src);
        let (rows, cols, value) = match axis {
            Axis::Rows => (len, c, sv[start * c..(start + len) * c].to_vec()),
            Axis::Cols => {
                let mut v = Vec::with_capacity(r * len);
                for i in 0..r {
                    v.extend_from_slice(&sv[i * c + start..i * c + start + len]);
                }
                (r, len, v)
            }
        };
        let rg = self.rg(src);
        Ok(self.push(rows, cols, value, Op::Slice { src, axis, start }, rg))
    }

    pub fn gather_rows(&mut self, src: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let (r, c) = self.shape(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: r,
            });
        }
        let sv = self.value(src);
        let mut value = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            value.extend_from_slice(&sv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(src);
        Ok(self.push(idx.len(), c, value, Op::GatherRows { src, idx }, rg))
    }

    /// Sums row `e` of `src` into output row `idx[e]`; output has `n` rows.
    pub fn scatter_add_rows(&mut self, src: Var, idx: impl Into<Arc<[usize]>>, n: usize) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let (r, c) = self.shape(src);
        if idx.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_rows",
                left: vec![r, c],
                right: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "scatter_add_rows",
                index: bad,
                len: n,
            });
        }
        let sv = self.value(src);
        let mut value = vec![0.0; n * c];
        for (e, &t) in idx.iter().enumerate() {
            for j in 0..c {
                value[t * c + j] += sv[e * c + j];
            }
        }
        let rg = self.rg(src);
        Ok(self.push(n, c, value, Op::ScatterAddRows { src, idx }, rg))
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |x| x.max(0.0),
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Softplus => kernels::softplus,
        };
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(r, c, value, Op::Unary(kind, a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    /// `log σ(x) = −softplus(−x)`, without forming σ(x).
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        let sp = self.softplus(n);
        self.scale(sp, -1.0)
    }

    /// Softmax of a column vector within each segment.
    pub fn segment_softmax(&mut self, src: Var, segments: Arc<Segments>) -> Result<Var> {
        let (r, c) = self.shape(src);
        if c != 1 || r != segments.len() {
            return Err(TensorError::ShapeMismatch {
                op: "segment_softmax",
                left: vec![r, c],
                right: vec![segments.len(), 1],
            });
        }
        let sv = self.value(src);
        let mut value = vec![0.0; r];
        for s in 0..segments.count() {
            let range = segments.range(s);
            if range.is_empty() {
                continue;
            }
            let m = sv[range.clone()].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in range.clone() {
                value[e] = (sv[e] - m).exp();
                z += value[e];
            }
            for e in range {
                value[e] /= z;
            }
        }
        let rg = self.rg(src);
        Ok(self.push(r, 1, value, Op::SegmentSoftmax { src, segments }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(1, 1, vec![s], Op::Mean(a), rg)
    }

    /// Sparse weighted aggregation `out[r] = Σ_e w[e]·x[col[e]]` over the entries
    /// of row `r`. `weights` is an `nnz×1` column.
    pub fn spmm(&mut self, weights: Var, x: Var, pattern: Arc<SparsePattern>) -> Result<Var> {
        let (wr, wc) = self.shape(weights);
        if wc != 1 || wr != pattern.nnz() {
            return Err(TensorError::ShapeMismatch {
                op: "spmm",
                left: vec![wr, wc],
                right: vec![pattern.nnz(), 1],
            });
        }
        let (xr, xc) = self.shape(x);
        if xr != pattern.n_cols() {
            return Err(TensorError::ShapeMismatch {
                op: "spmm",
                left: vec![pattern.n_rows(), pattern.n_cols()],
                right: vec![xr, xc],
            });
        }
        let value = kernels::spmm(
            pattern.segments().offsets(),
            pattern.cols(),
            self.value(weights),
            self.value(x),
            pattern.n_rows(),
            xc,
        );
        self.macs += (pattern.nnz() * xc) as u64;
        let rg = self.rg(weights) || self.rg(x);
        let n = pattern.n_rows();
        Ok(self.push(n, xc, value, Op::Spmm { weights, x, pattern }, rg))
    }

    /// Reverse pass from a `1×1` loss. Leaf gradients accumulate across calls
    /// until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = self.node(loss);
        if ln.rows != 1 || ln.cols != 1 {
            return Err(TensorError::NonScalarLoss(shape_of(ln)));
        }
        if !ln.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
                        None => node.grad = Some(g),
                    }
                }
                Op::Const => {}
                _ => self.propagate(i, &op, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i];
        match *op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(a);
                let (_, n) = self.shape(b);
                let mut ga = None;
                let mut gb = None;
                if self.rg(a) {
                    ga = Some(kernels::matmul_a_bt(g, self.value(b), m, n, k));
                }
                if self.rg(b) {
                    gb = Some(kernels::matmul_at_b(self.value(a), g, m, k, n));
                }
                if let Some(Fault::ScaleMatmulBackward(eps)) = self.fault {
                    for buf in [&mut ga, &mut gb].into_iter().flatten() {
                        buf.iter_mut().for_each(|x| *x *= 1.0 + eps);
                    }
                }
                if let Some(ga) = ga {
                    self.send(grads, a, ga);
                }
                if let Some(gb) = gb {
                    self.send(grads, b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.rg(a) {
                    self.send(grads, a, g.to_vec());
                }
                if self.rg(b) {
                    let mode = self.bcast("add", a, b).expect("recorded shapes");
                    let gb = self.reduce_bcast(mode, g, out.cols, self.node(b).value.len());
                    self.send(grads, b, gb);
                }
            }
            Op::Mul(a, b) => {
                let mode = self.bcast("mul", a, b).expect("recorded shapes");
                let c = out.cols;
                let av = self.value(a);
                let bv = self.value(b);
                if self.rg(a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(e, gi)| gi * bv[Self::bidx(mode, e, c)])
                        .collect();
                    self.send(grads, a, ga);
                }
                if self.rg(b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(gi, x)| gi * x).collect();
                    let gb = self.reduce_bcast(mode, &prod, c, bv.len());
                    self.send(grads, b, gb);
                }
            }
            Op::Scale(a, s) => self.send(grads, a, g.iter().map(|x| x * s).collect()),
            Op::Concat(ref parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    let gp = match axis {
                        Axis::Rows => {
                            let block = g[offset * pc..(offset + pr) * pc].to_vec();
                            offset += pr;
                            block
                        }
                        Axis::Cols => {
                            let mut block = Vec::with_capacity(pr * pc);
                            for r in 0..pr {
                                let base = r * out.cols + offset;
                                block.extend_from_slice(&g[base..base + pc]);
                            }
                            offset += pc;
                            block
                        }
                    };
                    self.send(grads, p, gp);
                }
            }
            Op::Slice { src, axis, start } => {
                let (sr, sc) = self.shape(src);
                let mut gs = vec![0.0; sr * sc];
                match axis {
                    Axis::Rows => gs[start * sc..start * sc + g.len()].copy_from_slice(g),
                    Axis::Cols => {
                        for r in 0..sr {
                            gs[r * sc + start..r * sc + start + out.cols]
                                .copy_from_slice(&g[r * out.cols..(r + 1) * out.cols]);
                        }
                    }
                }
                self.send(grads, src, gs);
            }
            Op::GatherRows { src, ref idx } => {
                let (sr, c) = self.shape(src);
                let mut gs = vec![0.0; sr * c];
                for (e, &t) in idx.iter().enumerate() {
                    for j in 0..c {
                        gs[t * c + j] += g[e * c + j];
                    }
                }
                self.send(grads, src, gs);
            }
            Op::ScatterAddRows { src, ref idx } => {
                let c = out.cols;
                let mut gs = Vec::with_capacity(idx.len() * c);
                for &t in idx.iter() {
                    gs.extend_from_slice(&g[t * c..(t + 1) * c]);
                }
                self.send(grads, src, gs);
            }
            Op::Unary(kind, a) => {
                let x = self.value(a);
                let y = &out.value;
                let ga: Vec<f64> = match kind {
                    Unary::Relu => g.iter().zip(x).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect(),
                    Unary::Sigmoid => g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect(),
                    Unary::Tanh => g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect(),
                    Unary::Exp => g.iter().zip(y).map(|(gi, yi)| gi * yi).collect(),
                    Unary::Log => g.iter().zip(x).map(|(gi, xi)| gi / xi).collect(),
                    Unary::Softplus => g.iter().zip(x).map(|(gi, &xi)| gi * kernels::sigmoid(xi)).collect(),
                };
                self.send(grads, a, ga);
            }
            Op::SegmentSoftmax { src, ref segments } => {
                let y = &out.value;
                let mut gs = vec![0.0; y.len()];
                for s in 0..segments.count() {
                    let range = segments.range(s);
                    let dotp: f64 = range.clone().map(|e| y[e] * g[e]).sum();
                    for e in range {
                        gs[e] = y[e] * (g[e] - dotp);
                    }
                }
                self.send(grads, src, gs);
            }
            Op::Sum(a) => {
                let n = self.node(a).value.len();
                self.send(grads, a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.node(a).value.len();
                self.send(grads, a, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::Spmm { weights, x, ref pattern } => {
                let c = out.cols;
                let w = self.value(weights);
                let xv = self.value(x);
                if self.rg(x) {
                    let mut gx = vec![0.0; xv.len()];
                    for (e, (&r, &col)) in pattern.rows().iter().zip(pattern.cols()).enumerate() {
                        let we = w[e];
                        for j in 0..c {
                            gx[col * c + j] += we * g[r * c + j];
                        }
                    }
                    self.send(grads, x, gx);
                }
                if self.rg(weights) {
                    let rows = pattern.rows();
                    let cols = pattern.cols();
                    let gw = crate::par::map_range(pattern.nnz(), |e| {
                        kernels::dot(&g[rows[e] * c..(rows[e] + 1) * c], &xv[cols[e] * c..(cols[e] + 1) * c])
                    });
                    self.send(grads, weights, gw);
                }
            }
        }
    }

    fn reduce_bcast(&self, mode: Bcast, g: &[f64], cols: usize, blen: usize) -> Vec<f64> {
        match mode {
            Bcast::Same => g.to_vec(),
            _ => {
                let mut out = vec![0.0; blen];
                for (i, gi) in g.iter().enumerate() {
                    out[Self::bidx(mode, i, cols)] += gi;
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tape_with(rows: usize, cols: usize, f: impl Fn(usize) -> f64) -> (Tape, Var) {
        let mut t = Tape::new();
        let v = t.param(rows, cols, (0..rows * cols).map(f).collect()).unwrap();
        (t, v)
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut t = Tape::new();
        let x = t.scalar(0.0);
        let y = t.softplus(x);
        assert_relative_eq!(t.scalar_value(y), std::f64::consts::LN_2, epsilon = 1e-16);
    }

    #[test]
    fn square_derivative() {
        let (mut t, x) = tape_with(1, 1, |_| 3.0);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_gives_ones() {
        let (mut t, w) = tape_with(2, 3, |i| i as f64 - 2.5);
        let s = t.sum(w);
        t.backward(s).unwrap();
        assert!(t.grad(w).unwrap().iter().all(|g| *g == 1.0));
    }

    #[test]
    fn matmul_sum_grad_is_ones_times_bt() {
        let mut t = Tape::new();
        let a = t.param(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = t.param(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.5, 3.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        let s = t.sum(c);
        t.backward(s).unwrap();
        // ones(2x2)·Bᵀ: each row is the row sums of B.
        let expected = [-0.5, 2.0, 4.5, -0.5, 2.0, 4.5];
        assert_eq!(t.grad(a).unwrap(), &expected);
        // Aᵀ·ones(2x2): each row is the column sums of A repeated.
        assert_eq!(t.grad(b).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn disconnected_leaf_has_no_grad() {
        let mut t = Tape::new();
        let a = t.param(1, 2, vec![1.0, 2.0]).unwrap();
        let b = t.param(1, 2, vec![3.0, 4.0]).unwrap();
        let s = t.sum(a);
        t.backward(s).unwrap();
        assert!(t.grad(b).is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let (mut t, x) = tape_with(1, 1, |_| 2.0);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[8.0]);
        t.zero_grads();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (mut t, x) = tape_with(2, 2, |i| i as f64);
        assert_eq!(t.backward(x), Err(TensorError::NonScalarLoss(vec![2, 2])));
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = t.constant(2, 3, vec![0.0; 6]).unwrap();
        match t.matmul(a, b) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn segment_softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(5, 1, vec![1.0, 2.0, 3.0, -1.0, 0.5]).unwrap();
        let seg = Arc::new(Segments::from_ids(&[0, 0, 0, 2, 2], 3).unwrap());
        let y = t.segment_softmax(x, seg).unwrap();
        let v = t.value(y);
        assert_relative_eq!(v[0] + v[1] + v[2], 1.0, epsilon = 1e-15);
        assert_relative_eq!(v[3] + v[4], 1.0, epsilon = 1e-15);
        assert!(Segments::from_ids(&[1, 0], 2).is_err());
    }

    #[test]
    fn spmm_matches_dense() {
        let mut t = Tape::new();
        // [[0.5, 0.5, 0], [0, 1, 0], [0.25, 0, 0.75]]
        let pattern = Arc::new(SparsePattern::new(3, 3, vec![0, 0, 1, 2, 2], vec![0, 1, 1, 0, 2]).unwrap());
        let w = t.constant(5, 1, vec![0.5, 0.5, 1.0, 0.25, 0.75]).unwrap();
        let x = t.constant(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = t.spmm(w, x, pattern).unwrap();
        assert_eq!(t.value(y), &[2.0, 3.0, 3.0, 4.0, 4.0, 5.0]);
        assert_eq!(t.macs(), 10);
    }
}
