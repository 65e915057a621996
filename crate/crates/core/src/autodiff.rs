//! Dense-matrix reverse-mode differentiation on an explicit tape.
//!
//! Tensors are cheap handles (`Rc`) around a value matrix and a lazily
//! allocated gradient of the same shape. Every differentiable operation is a
//! method on [`Tape`]; the tape records one entry per operation in execution
//! order, so a single reverse sweep visits each operation exactly once with
//! all downstream gradients already accumulated. Gradients accumulate with
//! `+=`, which makes parameter sharing safe.
//!
//! The engine is deliberately small: 2-D matrices only, no broadcasting
//! except the explicit row-vector and per-row-scalar forms, single-threaded
//! kernels so results are bitwise reproducible.

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sparse::{Csr, SpMat};

/// tanh-approximation constant sqrt(2/pi) for GELU.
pub const GELU_COEFF: f64 = 0.797_884_560_802_865_4;

struct TensorInner {
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    node_id: Option<usize>,
}

/// Handle to a matrix participating in the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<TensorInner>>);

impl Tensor {
    /// Non-trainable input; never receives a gradient.
    pub fn constant(value: Matrix) -> Self {
        Tensor(Rc::new(RefCell::new(TensorInner {
            value,
            grad: None,
            requires_grad: false,
            node_id: None,
        })))
    }

    /// Trainable leaf; gradients accumulate across backward passes until
    /// `zero_grad`.
    pub fn parameter(value: Matrix) -> Self {
        Tensor(Rc::new(RefCell::new(TensorInner {
            value,
            grad: None,
            requires_grad: true,
            node_id: None,
        })))
    }

    fn result(value: Matrix, requires_grad: bool) -> Self {
        Tensor(Rc::new(RefCell::new(TensorInner {
            value,
            grad: None,
            requires_grad,
            node_id: None,
        })))
    }

    pub fn rows(&self) -> usize {
        self.0.borrow().value.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.borrow().value.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.borrow().value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn node_id(&self) -> Option<usize> {
        self.0.borrow().node_id
    }

    /// Borrow the value matrix.
    pub fn value(&self) -> Ref<'_, Matrix> {
        Ref::map(self.0.borrow(), |inner| &inner.value)
    }

    pub fn value_clone(&self) -> Matrix {
        self.0.borrow().value.clone()
    }

    /// Scalar content of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        let inner = self.0.borrow();
        debug_assert_eq!(inner.value.shape(), (1, 1));
        inner.value.data()[0]
    }

    pub fn grad_clone(&self) -> Option<Matrix> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Overwrite the value in place (shape must match).
    pub fn assign(&self, value: &Matrix) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(inner.value.shape(), value.shape());
        inner.value = value.clone();
    }

    /// Read/write a single flat entry, for finite-difference probes.
    pub fn flat(&self, idx: usize) -> f64 {
        self.0.borrow().value.data()[idx]
    }

    pub fn set_flat(&self, idx: usize, v: f64) {
        self.0.borrow_mut().value.data_mut()[idx] = v;
    }

    pub fn len(&self) -> usize {
        let inner = self.0.borrow();
        inner.value.rows() * inner.value.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mutate value with read access to the gradient, for optimizer steps.
    pub fn update(&self, f: impl FnOnce(&mut Matrix, Option<&Matrix>)) {
        let mut inner = self.0.borrow_mut();
        let TensorInner { value, grad, .. } = &mut *inner;
        f(value, grad.as_ref());
    }

    fn accumulate(&self, contrib: &Matrix) {
        let mut inner = self.0.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        let shape = inner.value.shape();
        debug_assert_eq!(shape, contrib.shape());
        match &mut inner.grad {
            Some(g) => g.add_scaled(contrib, 1.0),
            None => inner.grad = Some(contrib.clone()),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.value.shape())
            .field("requires_grad", &inner.requires_grad)
            .field("node_id", &inner.node_id)
            .finish()
    }
}

/// Elementwise activation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActKind {
    Relu,
    Gelu,
    Swish,
    LeakyRelu(f64),
    Sigmoid,
}

impl ActKind {
    fn eval(self, x: f64) -> f64 {
        match self {
            ActKind::Relu => x.max(0.0),
            ActKind::Gelu => {
                let u = GELU_COEFF * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            ActKind::Swish => x * sigmoid(x),
            ActKind::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            ActKind::Sigmoid => sigmoid(x),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            // subgradient 0 at the kink
            ActKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActKind::Gelu => {
                let u = GELU_COEFF * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_COEFF * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            ActKind::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            ActKind::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            ActKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Op {
    MatMul {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    Add {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    /// Row vector added to every row.
    AddRow {
        a: Tensor,
        row: Tensor,
        out: Tensor,
    },
    /// Row i scaled by column[i].
    ScaleRows {
        a: Tensor,
        col: Tensor,
        out: Tensor,
    },
    /// Whole matrix scaled by a 1x1 tensor.
    ScaleScalar {
        a: Tensor,
        s: Tensor,
        out: Tensor,
    },
    /// k*a + c with f64 constants.
    AffineConst {
        a: Tensor,
        k: f64,
        out: Tensor,
    },
    Activation {
        a: Tensor,
        kind: ActKind,
        out: Tensor,
    },
    SoftmaxRows {
        a: Tensor,
        out: Tensor,
    },
    LayerNormRows {
        a: Tensor,
        gain: Tensor,
        bias: Tensor,
        out: Tensor,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    MeanRows {
        a: Tensor,
        out: Tensor,
    },
    Sum {
        a: Tensor,
        out: Tensor,
    },
    TakeColumn {
        a: Tensor,
        col: usize,
        out: Tensor,
    },
    TakeEntry {
        a: Tensor,
        row: usize,
        col: usize,
        out: Tensor,
    },
    Dropout {
        a: Tensor,
        mask: Matrix,
        out: Tensor,
    },
    SpMatMul {
        mat: Arc<SpMat>,
        h: Tensor,
        out: Tensor,
    },
    /// Single-head additive attention aggregation over a fixed neighborhood
    /// structure; `alpha` and `pre` are edge-aligned buffers saved at forward
    /// time (attention weights and pre-activation scores).
    EdgeSoftmaxAggregate {
        adj: Arc<Csr>,
        h: Tensor,
        src_score: Tensor,
        dst_score: Tensor,
        slope: f64,
        alpha: Vec<f64>,
        pre: Vec<f64>,
        out: Tensor,
    },
    /// Forward takes the hard values; backward routes the gradient to the
    /// soft distribution unchanged.
    StraightThrough {
        soft: Tensor,
        out: Tensor,
    },
    MaskedCrossEntropy {
        logits: Tensor,
        probs: Matrix,
        labels: Rc<Vec<usize>>,
        mask: Rc<Vec<usize>>,
        out: Tensor,
    },
}

/// Records operations for one forward pass. Cleared by `backward`.
pub struct Tape {
    ops: RefCell<Vec<Op>>,
    recording: bool,
}

impl Tape {
    /// A recording tape; required for `backward`.
    pub fn new() -> Self {
        Tape {
            ops: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// Forward-only tape: nothing is recorded and outputs never require
    /// gradients.
    pub fn inference() -> Self {
        Tape {
            ops: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_ops(&self) -> usize {
        self.ops.borrow().len()
    }

    fn record(&self, out: &Tensor, op: impl FnOnce() -> Op) {
        if !self.recording {
            return;
        }
        if !out.0.borrow().requires_grad {
            return;
        }
        let mut ops = self.ops.borrow_mut();
        out.0.borrow_mut().node_id = Some(ops.len());
        ops.push(op());
    }

    fn flows(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    /// a · b
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ar, ac) = a.shape();
        let (br, bc) = b.shape();
        if ac != br {
            return Err(Error::dimension(
                "matmul",
                format!("{ar}x{ac} by {br}x{bc}"),
            ));
        }
        let value = a.value().matmul(&b.value());
        let out = Tensor::result(value, self.flows(&[a, b]));
        self.record(&out, || Op::MatMul {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::dimension(
                "add",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let value = a.value().zip(&b.value(), |x, y| x + y);
        let out = Tensor::result(value, self.flows(&[a, b]));
        self.record(&out, || Op::Add {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::dimension(
                "mul",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let value = a.value().zip(&b.value(), |x, y| x * y);
        let out = Tensor::result(value, self.flows(&[a, b]));
        self.record(&out, || Op::Mul {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Explicit row-vector broadcast: every row of `a` plus `row` (1 x cols).
    pub fn add_row(&self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        if row.rows() != 1 || row.cols() != a.cols() {
            return Err(Error::dimension(
                "add_row",
                format!("{:?} plus row {:?}", a.shape(), row.shape()),
            ));
        }
        let mut value = a.value_clone();
        {
            let r = row.value();
            let rv = r.row(0);
            for i in 0..value.rows() {
                for (o, &b) in value.row_mut(i).iter_mut().zip(rv) {
                    *o += b;
                }
            }
        }
        let out = Tensor::result(value, self.flows(&[a, row]));
        self.record(&out, || Op::AddRow {
            a: a.clone(),
            row: row.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Row i of `a` scaled by `col[i]` (col is rows x 1).
    pub fn scale_rows(&self, a: &Tensor, col: &Tensor) -> Result<Tensor> {
        if col.cols() != 1 || col.rows() != a.rows() {
            return Err(Error::dimension(
                "scale_rows",
                format!("{:?} scaled by {:?}", a.shape(), col.shape()),
            ));
        }
        let mut value = a.value_clone();
        {
            let c = col.value();
            for i in 0..value.rows() {
                let s = c.get(i, 0);
                for x in value.row_mut(i) {
                    *x *= s;
                }
            }
        }
        let out = Tensor::result(value, self.flows(&[a, col]));
        self.record(&out, || Op::ScaleRows {
            a: a.clone(),
            col: col.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Whole matrix scaled by a 1x1 tensor.
    pub fn scale_scalar(&self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.shape() != (1, 1) {
            return Err(Error::dimension(
                "scale_scalar",
                format!("scale has shape {:?}", s.shape()),
            ));
        }
        let sv = s.item();
        let value = a.value().map(|x| sv * x);
        let out = Tensor::result(value, self.flows(&[a, s]));
        self.record(&out, || Op::ScaleScalar {
            a: a.clone(),
            s: s.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// k*a + c with plain constants.
    pub fn affine_const(&self, a: &Tensor, k: f64, c: f64) -> Tensor {
        let value = a.value().map(|x| k * x + c);
        let out = Tensor::result(value, self.flows(&[a]));
        self.record(&out, || Op::AffineConst {
            a: a.clone(),
            k,
            out: out.clone(),
        });
        out
    }

    pub fn activation(&self, a: &Tensor, kind: ActKind) -> Tensor {
        let value = a.value().map(|x| kind.eval(x));
        let out = Tensor::result(value, self.flows(&[a]));
        self.record(&out, || Op::Activation {
            a: a.clone(),
            kind,
            out: out.clone(),
        });
        out
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self, a: &Tensor) -> Tensor {
        let value = softmax_rows_value(&a.value());
        let out = Tensor::result(value, self.flows(&[a]));
        self.record(&out, || Op::SoftmaxRows {
            a: a.clone(),
            out: out.clone(),
        });
        out
    }

    /// Per-row standardization over features followed by the affine map
    /// `gain * xhat + bias`; gain and bias are 1 x cols row vectors.
    pub fn layernorm_rows(
        &self,
        a: &Tensor,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let cols = a.cols();
        if gain.shape() != (1, cols) || bias.shape() != (1, cols) {
            return Err(Error::dimension(
                "layernorm_rows",
                format!(
                    "gain {:?} / bias {:?} for input {:?}",
                    gain.shape(),
                    bias.shape(),
                    a.shape()
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::contract("layernorm_rows", "eps must be positive"));
        }
        let av = a.value();
        let rows = av.rows();
        let mut normalized = Matrix::zeros(rows, cols);
        let mut inv_std = vec![0.0; rows];
        for (i, slot) in inv_std.iter_mut().enumerate() {
            let r = av.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + eps).sqrt();
            *slot = istd;
            for (j, &x) in r.iter().enumerate() {
                normalized.set(i, j, (x - mean) * istd);
            }
        }
        drop(av);
        let mut value = normalized.clone();
        {
            let gv = gain.value();
            let bv = bias.value();
            let g = gv.row(0);
            let b = bv.row(0);
            for i in 0..rows {
                for (j, x) in value.row_mut(i).iter_mut().enumerate() {
                    *x = *x * g[j] + b[j];
                }
            }
        }
        let out = Tensor::result(value, self.flows(&[a, gain, bias]));
        self.record(&out, || Op::LayerNormRows {
            a: a.clone(),
            gain: gain.clone(),
            bias: bias.clone(),
            out: out.clone(),
            normalized,
            inv_std,
        });
        Ok(out)
    }

    /// Column means as a 1 x cols row vector.
    pub fn mean_rows(&self, a: &Tensor) -> Tensor {
        let av = a.value();
        let (rows, cols) = av.shape();
        let mut value = Matrix::zeros(1, cols);
        for i in 0..rows {
            for (j, &x) in av.row(i).iter().enumerate() {
                value.data_mut()[j] += x;
            }
        }
        for x in value.data_mut() {
            *x /= rows as f64;
        }
        drop(av);
        let out = Tensor::result(value, self.flows(&[a]));
        self.record(&out, || Op::MeanRows {
            a: a.clone(),
            out: out.clone(),
        });
        out
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&self, a: &Tensor) -> Tensor {
        let value = Matrix::from_vec(1, 1, vec![a.value().sum()]);
        let out = Tensor::result(value, self.flows(&[a]));
        self.record(&out, || Op::Sum {
            a: a.clone(),
            out: out.clone(),
        });
        out
    }

    /// Column `col` as a rows x 1 tensor.
    pub fn take_column(&self, a: &Tensor, col: usize) -> Result<Tensor> {
        if col >= a.cols() {
            return Err(Error::dimension(
                "take_column",
                format!("column {col} of {:?}", a.shape()),
            ));
        }
        let av = a.value();
        let value = Matrix::from_vec(av.rows(), 1, (0..av.rows()).map(|i| av.get(i, col)).collect());
        drop(av);
        let out = Tensor::result(value, self.flows(&[a]));
        self.record(&out, || Op::TakeColumn {
            a: a.clone(),
            col,
            out: out.clone(),
        });
        Ok(out)
    }

    /// Single entry as a 1x1 tensor.
    pub fn take_entry(&self, a: &Tensor, row: usize, col: usize) -> Result<Tensor> {
        let (r, c) = a.shape();
        if row >= r || col >= c {
            return Err(Error::dimension(
                "take_entry",
                format!("entry ({row},{col}) of {r}x{c}"),
            ));
        }
        let value = Matrix::from_vec(1, 1, vec![a.value().get(row, col)]);
        let out = Tensor::result(value, self.flows(&[a]));
        self.record(&out, || Op::TakeEntry {
            a: a.clone(),
            row,
            col,
            out: out.clone(),
        });
        Ok(out)
    }

    /// Inverted dropout: surviving entries are scaled by 1/(1-rate) so the
    /// expectation is unchanged. Caller gates on training mode.
    pub fn dropout(&self, a: &Tensor, rate: f64, rng: &mut impl Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract("dropout", format!("rate {rate} not in [0,1)")));
        }
        if rate == 0.0 {
            return Ok(a.clone());
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let av = a.value();
        let mut mask = Matrix::zeros(av.rows(), av.cols());
        for x in mask.data_mut() {
            if rng.gen::<f64>() < keep {
                *x = scale;
            }
        }
        let value = av.zip(&mask, |x, m| x * m);
        drop(av);
        let out = Tensor::result(value, self.flows(&[a]));
        self.record(&out, || Op::Dropout {
            a: a.clone(),
            mask,
            out: out.clone(),
        });
        Ok(out)
    }

    /// S · h for a constant sparse matrix.
    pub fn spmatmul(&self, mat: &Arc<SpMat>, h: &Tensor) -> Result<Tensor> {
        if mat.num_rows() != h.rows() {
            return Err(Error::dimension(
                "spmatmul",
                format!("{} sparse rows by {:?}", mat.num_rows(), h.shape()),
            ));
        }
        let value = mat.mul_dense(&h.value());
        let out = Tensor::result(value, self.flows(&[h]));
        self.record(&out, || Op::SpMatMul {
            mat: Arc::clone(mat),
            h: h.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Attention aggregation: for each row i of `adj`, scores
    /// `leaky_relu(src_score[i] + dst_score[j])` are softmax-normalized over
    /// the row's neighbors j and used to average rows of `h`.
    pub fn edge_softmax_aggregate(
        &self,
        adj: &Arc<Csr>,
        h: &Tensor,
        src_score: &Tensor,
        dst_score: &Tensor,
        slope: f64,
    ) -> Result<Tensor> {
        let n = adj.num_rows();
        if h.rows() != n || src_score.shape() != (n, 1) || dst_score.shape() != (n, 1) {
            return Err(Error::dimension(
                "edge_softmax_aggregate",
                format!(
                    "adj {}x{} with h {:?}, scores {:?}/{:?}",
                    n,
                    n,
                    h.shape(),
                    src_score.shape(),
                    dst_score.shape()
                ),
            ));
        }
        let hv = h.value();
        let sv = src_score.value();
        let tv = dst_score.value();
        let cols = hv.cols();
        let mut alpha = vec![0.0; adj.nnz()];
        let mut pre = vec![0.0; adj.nnz()];
        let mut value = Matrix::zeros(n, cols);
        for i in 0..n {
            let range = adj.row_range(i);
            if range.is_empty() {
                continue;
            }
            let si = sv.get(i, 0);
            let mut max_e = f64::NEG_INFINITY;
            for e in range.clone() {
                let j = adj.row(i)[e - range.start];
                let z = si + tv.get(j, 0);
                pre[e] = z;
                let act = if z > 0.0 { z } else { slope * z };
                alpha[e] = act;
                max_e = max_e.max(act);
            }
            let mut denom = 0.0;
            for e in range.clone() {
                alpha[e] = (alpha[e] - max_e).exp();
                denom += alpha[e];
            }
            let orow = value.row_mut(i);
            for e in range.clone() {
                alpha[e] /= denom;
                let j = adj.row(i)[e - range.start];
                let hrow = hv.row(j);
                for (o, &x) in orow.iter_mut().zip(hrow) {
                    *o += alpha[e] * x;
                }
            }
        }
        drop(hv);
        drop(sv);
        drop(tv);
        let out = Tensor::result(value, self.flows(&[h, src_score, dst_score]));
        self.record(&out, || Op::EdgeSoftmaxAggregate {
            adj: Arc::clone(adj),
            h: h.clone(),
            src_score: src_score.clone(),
            dst_score: dst_score.clone(),
            slope,
            alpha,
            pre,
            out: out.clone(),
        });
        Ok(out)
    }

    /// Forward returns `hard` verbatim; backward passes the gradient to
    /// `soft` unchanged (straight-through estimator).
    pub fn straight_through(&self, soft: &Tensor, hard: Matrix) -> Result<Tensor> {
        if soft.shape() != hard.shape() {
            return Err(Error::dimension(
                "straight_through",
                format!("soft {:?} vs hard {:?}", soft.shape(), hard.shape()),
            ));
        }
        let out = Tensor::result(hard, self.flows(&[soft]));
        self.record(&out, || Op::StraightThrough {
            soft: soft.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Mean over `mask` of the negative log softmax probability of the true
    /// class, fused with log-sum-exp for stability.
    pub fn masked_cross_entropy(
        &self,
        logits: &Tensor,
        labels: &Rc<Vec<usize>>,
        mask: &Rc<Vec<usize>>,
    ) -> Result<Tensor> {
        let (n, c) = logits.shape();
        if labels.len() != n {
            return Err(Error::dimension(
                "masked_cross_entropy",
                format!("{} labels for {} rows", labels.len(), n),
            ));
        }
        if mask.is_empty() {
            return Err(Error::contract("masked_cross_entropy", "empty mask"));
        }
        if let Some(&bad) = mask.iter().find(|&&i| i >= n) {
            return Err(Error::contract(
                "masked_cross_entropy",
                format!("mask index {bad} out of range"),
            ));
        }
        let lv = logits.value();
        let probs = softmax_rows_value(&lv);
        let mut total = 0.0;
        for &i in mask.iter() {
            let label = labels[i];
            if label >= c {
                return Err(Error::contract(
                    "masked_cross_entropy",
                    format!("label {label} out of range for {c} classes"),
                ));
            }
            let row = lv.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[label];
        }
        drop(lv);
        let value = Matrix::from_vec(1, 1, vec![total / mask.len() as f64]);
        let out = Tensor::result(value, self.flows(&[logits]));
        self.record(&out, || Op::MaskedCrossEntropy {
            logits: logits.clone(),
            probs,
            labels: Rc::clone(labels),
            mask: Rc::clone(mask),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// tensor with `requires_grad` reachable on the tape; the tape is cleared
    /// afterwards.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.shape() != (1, 1) {
            return Err(Error::contract(
                "backward",
                format!("loss must be 1x1, got {:?}", loss.shape()),
            ));
        }
        if !self.recording {
            return Err(Error::contract("backward", "tape is in inference mode"));
        }
        loss.accumulate(&Matrix::from_vec(1, 1, vec![1.0]));
        let ops = std::mem::take(&mut *self.ops.borrow_mut());
        for op in ops.iter().rev() {
            apply_backward(op);
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

pub(crate) fn softmax_rows_value(a: &Matrix) -> Matrix {
    let (rows, cols) = a.shape();
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let r = a.row(i);
        let max = r.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let orow = out.row_mut(i);
        let mut denom = 0.0;
        for (o, &x) in orow.iter_mut().zip(r) {
            *o = (x - max).exp();
            denom += *o;
        }
        for o in orow.iter_mut() {
            *o /= denom;
        }
    }
    out
}

fn apply_backward(op: &Op) {
    match op {
        Op::MatMul { a, b, out } => {
            let Some(g) = out.grad_clone() else { return };
            let da = g.matmul_nt(&b.value());
            let db = a.value().matmul_tn(&g);
            a.accumulate(&da);
            b.accumulate(&db);
        }
        Op::Add { a, b, out } => {
            let Some(g) = out.grad_clone() else { return };
            a.accumulate(&g);
            b.accumulate(&g);
        }
        Op::Mul { a, b, out } => {
            let Some(g) = out.grad_clone() else { return };
            let da = g.zip(&b.value(), |x, y| x * y);
            let db = g.zip(&a.value(), |x, y| x * y);
            a.accumulate(&da);
            b.accumulate(&db);
        }
        Op::AddRow { a, row, out } => {
            let Some(g) = out.grad_clone() else { return };
            let mut drow = Matrix::zeros(1, g.cols());
            for i in 0..g.rows() {
                for (j, &x) in g.row(i).iter().enumerate() {
                    drow.data_mut()[j] += x;
                }
            }
            a.accumulate(&g);
            row.accumulate(&drow);
        }
        Op::ScaleRows { a, col, out } => {
            let Some(g) = out.grad_clone() else { return };
            let cv = col.value_clone();
            let av = a.value_clone();
            let mut da = g.clone();
            let mut dcol = Matrix::zeros(g.rows(), 1);
            for i in 0..g.rows() {
                let s = cv.get(i, 0);
                let mut dot = 0.0;
                for (x, &y) in da.row_mut(i).iter_mut().zip(av.row(i)) {
                    dot += *x * y;
                    *x *= s;
                }
                dcol.set(i, 0, dot);
            }
            a.accumulate(&da);
            col.accumulate(&dcol);
        }
        Op::ScaleScalar { a, s, out } => {
            let Some(g) = out.grad_clone() else { return };
            let sv = s.item();
            let da = g.map(|x| sv * x);
            let ds = Matrix::from_vec(
                1,
                1,
                vec![g
                    .data()
                    .iter()
                    .zip(a.value().data())
                    .map(|(&x, &y)| x * y)
                    .sum()],
            );
            a.accumulate(&da);
            s.accumulate(&ds);
        }
        Op::AffineConst { a, k, out } => {
            let Some(g) = out.grad_clone() else { return };
            a.accumulate(&g.map(|x| k * x));
        }
        Op::Activation { a, kind, out } => {
            let Some(g) = out.grad_clone() else { return };
            let da = g.zip(&a.value(), |gx, x| gx * kind.derivative(x));
            a.accumulate(&da);
        }
        Op::SoftmaxRows { a, out } => {
            let Some(g) = out.grad_clone() else { return };
            let y = out.value_clone();
            let mut da = Matrix::zeros(g.rows(), g.cols());
            for i in 0..g.rows() {
                let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(&gx, &yx)| gx * yx).sum();
                for (j, d) in da.row_mut(i).iter_mut().enumerate() {
                    *d = y.get(i, j) * (g.get(i, j) - dot);
                }
            }
            a.accumulate(&da);
        }
        Op::LayerNormRows {
            a,
            gain,
            bias,
            out,
            normalized,
            inv_std,
        } => {
            let Some(g) = out.grad_clone() else { return };
            let (rows, cols) = g.shape();
            let gv = gain.value_clone();
            let gainrow = gv.row(0);
            let mut dgain = Matrix::zeros(1, cols);
            let mut dbias = Matrix::zeros(1, cols);
            let mut da = Matrix::zeros(rows, cols);
            for (i, &istd) in inv_std.iter().enumerate() {
                let grow = g.row(i);
                let xhat = normalized.row(i);
                for j in 0..cols {
                    dgain.data_mut()[j] += grow[j] * xhat[j];
                    dbias.data_mut()[j] += grow[j];
                }
                // d xhat
                let dxhat: Vec<f64> = (0..cols).map(|j| grow[j] * gainrow[j]).collect();
                let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
                let mean_dxhat_xhat =
                    dxhat.iter().zip(xhat).map(|(&d, &x)| d * x).sum::<f64>() / cols as f64;
                for j in 0..cols {
                    da.set(
                        i,
                        j,
                        istd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat),
                    );
                }
            }
            a.accumulate(&da);
            gain.accumulate(&dgain);
            bias.accumulate(&dbias);
        }
        Op::MeanRows { a, out } => {
            let Some(g) = out.grad_clone() else { return };
            let rows = a.rows();
            let scale = 1.0 / rows as f64;
            let mut da = Matrix::zeros(rows, g.cols());
            for i in 0..rows {
                for (j, x) in da.row_mut(i).iter_mut().enumerate() {
                    *x = g.data()[j] * scale;
                }
            }
            a.accumulate(&da);
        }
        Op::Sum { a, out } => {
            let Some(g) = out.grad_clone() else { return };
            let gv = g.data()[0];
            a.accumulate(&Matrix::filled(a.rows(), a.cols(), gv));
        }
        Op::TakeColumn { a, col, out } => {
            let Some(g) = out.grad_clone() else { return };
            let mut da = Matrix::zeros(a.rows(), a.cols());
            for i in 0..a.rows() {
                da.set(i, *col, g.get(i, 0));
            }
            a.accumulate(&da);
        }
        Op::TakeEntry { a, row, col, out } => {
            let Some(g) = out.grad_clone() else { return };
            let mut da = Matrix::zeros(a.rows(), a.cols());
            da.set(*row, *col, g.data()[0]);
            a.accumulate(&da);
        }
        Op::Dropout { a, mask, out } => {
            let Some(g) = out.grad_clone() else { return };
            a.accumulate(&g.zip(mask, |x, m| x * m));
        }
        Op::SpMatMul { mat, h, out } => {
            let Some(g) = out.grad_clone() else { return };
            h.accumulate(&mat.mul_transpose_dense(&g));
        }
        Op::EdgeSoftmaxAggregate {
            adj,
            h,
            src_score,
            dst_score,
            slope,
            alpha,
            pre,
            out,
        } => {
            let Some(g) = out.grad_clone() else { return };
            let hv = h.value_clone();
            let n = adj.num_rows();
            let cols = hv.cols();
            let mut dh = Matrix::zeros(n, cols);
            let mut dsrc = Matrix::zeros(n, 1);
            let mut ddst = Matrix::zeros(n, 1);
            for i in 0..n {
                let range = adj.row_range(i);
                if range.is_empty() {
                    continue;
                }
                let grow = g.row(i);
                // value path and dL/dalpha
                let mut dalpha = vec![0.0; range.len()];
                for (k, e) in range.clone().enumerate() {
                    let j = adj.row(i)[k];
                    let hrow = hv.row(j);
                    dalpha[k] = grow.iter().zip(hrow).map(|(&gx, &hx)| gx * hx).sum();
                    let drow = dh.row_mut(j);
                    for (d, &gx) in drow.iter_mut().zip(grow) {
                        *d += alpha[e] * gx;
                    }
                }
                // softmax backward over the row
                let mean: f64 = range
                    .clone()
                    .enumerate()
                    .map(|(k, e)| alpha[e] * dalpha[k])
                    .sum();
                for (k, e) in range.clone().enumerate() {
                    let de = alpha[e] * (dalpha[k] - mean);
                    let dz = if pre[e] > 0.0 { de } else { slope * de };
                    let j = adj.row(i)[k];
                    *dsrc.row_mut(i).first_mut().unwrap() += dz;
                    *ddst.row_mut(j).first_mut().unwrap() += dz;
                }
            }
            h.accumulate(&dh);
            src_score.accumulate(&dsrc);
            dst_score.accumulate(&ddst);
        }
        Op::StraightThrough { soft, out } => {
            let Some(g) = out.grad_clone() else { return };
            soft.accumulate(&g);
        }
        Op::MaskedCrossEntropy {
            logits,
            probs,
            labels,
            mask,
            out,
        } => {
            let Some(g) = out.grad_clone() else { return };
            let gv = g.data()[0];
            let scale = gv / mask.len() as f64;
            let mut da = Matrix::zeros(probs.rows(), probs.cols());
            for &i in mask.iter() {
                let label = labels[i];
                let prow = probs.row(i);
                let drow = da.row_mut(i);
                for (j, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                    *d = scale * (p - if j == label { 1.0 } else { 0.0 });
                }
            }
            logits.accumulate(&da);
        }
    }
}
