//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! A [`Tape`] records every primitive operation of one forward pass in
//! topological order. [`Tape::backward`] replays the recording in reverse and
//! accumulates exact adjoints into a fresh [`Gradients`] buffer, so parameter
//! tensors themselves never carry gradient state: reading a gradient as data
//! (the stop-gradient pattern used by the domain-guided perturbations) cannot
//! leak into a later update.
//!
//! The op catalog is deliberately small and auditable. Elementwise binary ops
//! broadcast only scalar-vs-tensor; row-vector broadcasts are expressed as
//! `ones_column * row` matmuls instead.

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Floor used when taking logarithms; inputs below it are clamped and the
/// clamped region contributes zero gradient.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(ValueId, ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Relu(ValueId),
    Sigmoid(ValueId),
    SoftmaxRows(ValueId),
    Log(ValueId),
    Sum(ValueId),
    Mean(ValueId),
    SumSq(ValueId),
    Hinge(ValueId),
    Scale(ValueId, f64),
    ConcatCols(ValueId, ValueId),
    SelectRows(ValueId, Vec<usize>),
}

impl Op {
    fn operands(&self) -> [Option<ValueId>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatCols(a, b) => {
                [Some(a), Some(b)]
            }
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumSq(a)
            | Op::Hinge(a)
            | Op::Scale(a, _)
            | Op::SelectRows(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// One forward pass worth of recorded operations.
///
/// Tapes are rebuilt per forward pass (define-by-run); node operands always
/// have smaller indices than the node itself.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one [`Tape::backward`] call.
///
/// Adjoints for shared subexpressions accumulate by addition. Values that are
/// not ancestors of the backward output keep an all-zero adjoint.
pub struct Gradients {
    adj: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    reached: Vec<bool>,
}

impl Gradients {
    /// Adjoint of `id` as a flat slice.
    pub fn wrt(&self, id: ValueId) -> Result<&[f64]> {
        self.adj
            .get(id.0)
            .map(|v| v.as_slice())
            .ok_or(Error::NotOnTape(id.0, self.adj.len()))
    }

    /// Adjoint of `id` as a tensor of the value's shape.
    pub fn wrt_tensor(&self, id: ValueId) -> Result<Tensor> {
        let data = self.wrt(id)?.to_vec();
        Tensor::new(self.shapes[id.0].clone(), data)
    }

    /// Whether `id` was an ancestor of the differentiated scalar.
    pub fn is_ancestor(&self, id: ValueId) -> bool {
        self.reached.get(id.0).copied().unwrap_or(false)
    }
}

/// Gradient of a scalar with respect to one interior activation.
///
/// `connected` is false when the activation was not an ancestor of the
/// scalar; in that case `grad` is all zeros. The flag makes the degenerate
/// case distinguishable from a legitimately zero gradient.
pub struct ActivationGrad {
    pub grad: Tensor,
    pub connected: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn check_id(&self, id: ValueId, op: &'static str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("operand id {} not on tape (len {})", id.0, self.nodes.len()),
            });
        }
        Ok(())
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<ValueId> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { op, value });
        Ok(ValueId(self.nodes.len() - 1))
    }

    /// Register an input tensor. Leaves are both trainable parameters and
    /// constants; the distinction is only which adjoints the caller reads.
    pub fn leaf(&mut self, value: Tensor) -> Result<ValueId> {
        self.push(Op::Leaf, value, "leaf")
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_id(a, "matmul")?;
        self.check_id(b, "matmul")?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    fn binary_elementwise(
        &mut self,
        a: ValueId,
        b: ValueId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<ValueId> {
        self.check_id(a, name)?;
        self.check_id(b, name)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data().iter()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.is_scalar() {
            let s = tb.item();
            let data = ta.data().iter().map(|&x| f(x, s)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if ta.is_scalar() {
            let s = ta.item();
            let data = tb.data().iter().map(|&y| f(s, y)).collect();
            Tensor::new(tb.shape().to_vec(), data)?
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?} (only scalar broadcast supported)", ta.shape(), tb.shape()),
            });
        };
        self.push(op, value, name)
    }

    /// Elementwise sum; shapes must match or one operand must be a scalar.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise difference; scalar broadcast as in [`Tape::add`].
    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product; scalar broadcast as in [`Tape::add`].
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(
        &mut self,
        a: ValueId,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<ValueId> {
        self.check_id(a, name)?;
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, value, name)
    }

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary(a, "relu", |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary(a, "sigmoid", |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    /// Natural log, clamped below at [`LOG_FLOOR`].
    pub fn log(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary(a, "log", |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    /// Elementwise hinge `max(1 - t, 0)`; subgradient 0 at the kink.
    pub fn hinge(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary(a, "hinge", |t| (1.0 - t).max(0.0), Op::Hinge(a))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        self.unary(a, "scale", |x| c * x, Op::Scale(a, c))
    }

    /// Row-wise softmax of a 2-D tensor, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, a: ValueId) -> Result<ValueId> {
        self.check_id(a, "softmax")?;
        let ta = &self.nodes[a.0].value;
        if !ta.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                detail: format!("expected matrix, got {:?}", ta.shape()),
            });
        }
        let (n, k) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            let row = ta.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - m).exp();
                data[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                data[i * k + j] /= z;
            }
        }
        let value = Tensor::new(vec![n, k], data)?;
        self.push(Op::SoftmaxRows(a), value, "softmax")
    }

    /// Sum of all entries (scalar output).
    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        self.check_id(a, "sum")?;
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    /// Mean of all entries (scalar output).
    pub fn mean(&mut self, a: ValueId) -> Result<ValueId> {
        self.check_id(a, "mean")?;
        let t = &self.nodes[a.0].value;
        if t.numel() == 0 {
            return Err(Error::ShapeMismatch { op: "mean", detail: "empty tensor".into() });
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s), "mean")
    }

    /// Squared L2 norm of all entries (scalar output).
    pub fn sum_sq(&mut self, a: ValueId) -> Result<ValueId> {
        self.check_id(a, "sum-sq")?;
        let s = self.nodes[a.0].value.data().iter().map(|v| v * v).sum();
        self.push(Op::SumSq(a), Tensor::scalar(s), "sum-sq")
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_id(a, "concat-cols")?;
        self.check_id(b, "concat-cols")?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.is_matrix() || !tb.is_matrix() || ta.rows() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat-cols",
                detail: format!("{:?} | {:?}", ta.shape(), tb.shape()),
            });
        }
        let (n, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let value = Tensor::new(vec![n, ca + cb], data)?;
        self.push(Op::ConcatCols(a, b), value, "concat-cols")
    }

    /// Gather the given rows of a matrix (duplicates allowed).
    pub fn select_rows(&mut self, a: ValueId, rows: &[usize]) -> Result<ValueId> {
        self.check_id(a, "select-rows")?;
        let ta = &self.nodes[a.0].value;
        if !ta.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "select-rows",
                detail: format!("expected matrix, got {:?}", ta.shape()),
            });
        }
        let (n, c) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::OutOfRange { what: "row index", index: r, len: n });
            }
            data.extend_from_slice(ta.row(r));
        }
        let value = Tensor::new(vec![rows.len(), c], data)?;
        self.push(Op::SelectRows(a, rows.to_vec()), value, "select-rows")
    }

    /// Mark every ancestor of `out` (including `out` itself).
    fn reachability(&self, out: ValueId) -> Vec<bool> {
        let mut reached = vec![false; self.nodes.len()];
        reached[out.0] = true;
        for k in (0..=out.0).rev() {
            if !reached[k] {
                continue;
            }
            for operand in self.nodes[k].op.operands().into_iter().flatten() {
                reached[operand.0] = true;
            }
        }
        reached
    }

    /// Reverse pass from a scalar output.
    ///
    /// Returns adjoints for every node on the tape; the caller reads the ones
    /// it wants. Adjoints live in the returned buffer only, so repeated
    /// backward calls over one tape never interfere.
    pub fn backward(&self, out: ValueId) -> Result<Gradients> {
        if out.0 >= self.nodes.len() {
            return Err(Error::NotOnTape(out.0, self.nodes.len()));
        }
        if !self.nodes[out.0].value.is_scalar() {
            return Err(Error::NotScalar(self.nodes[out.0].value.shape().to_vec()));
        }
        let reached = self.reachability(out);
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.numel()])
            .collect();
        adj[out.0][0] = 1.0;

        for k in (0..=out.0).rev() {
            if !reached[k] {
                continue;
            }
            // Split borrows: gradient of node k is read while operand
            // adjoints are written.
            let (op, val) = (&self.nodes[k].op, &self.nodes[k].value);
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let g = std::mem::take(&mut adj[k]);
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let (m, kk, n) = (ta.rows(), ta.cols(), tb.cols());
                    // dA = G * B^T
                    {
                        let da = &mut adj[a.0];
                        for i in 0..m {
                            for p in 0..kk {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * tb.data()[p * n + j];
                                }
                                da[i * kk + p] += s;
                            }
                        }
                    }
                    // dB = A^T * G
                    {
                        let db = &mut adj[b.0];
                        for p in 0..kk {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += ta.data()[i * kk + p] * g[i * n + j];
                                }
                                db[p * n + j] += s;
                            }
                        }
                    }
                    adj[k] = g;
                }
                Op::Add(a, b) => {
                    let g = std::mem::take(&mut adj[k]);
                    self.accumulate_broadcast(&mut adj, *a, &g, None);
                    self.accumulate_broadcast(&mut adj, *b, &g, None);
                    adj[k] = g;
                }
                Op::Sub(a, b) => {
                    let g = std::mem::take(&mut adj[k]);
                    self.accumulate_broadcast(&mut adj, *a, &g, None);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate_broadcast(&mut adj, *b, &neg, None);
                    adj[k] = g;
                }
                Op::Mul(a, b) => {
                    let g = std::mem::take(&mut adj[k]);
                    // d a = g * b, d b = g * a, with scalar broadcast handled
                    // by the accumulate helper.
                    let tb = &self.nodes[b.0].value;
                    let ta = &self.nodes[a.0].value;
                    self.accumulate_broadcast(&mut adj, *a, &g, Some(tb));
                    self.accumulate_broadcast(&mut adj, *b, &g, Some(ta));
                    adj[k] = g;
                }
                Op::Relu(a) => {
                    let g = std::mem::take(&mut adj[k]);
                    let ta = &self.nodes[a.0].value;
                    let da = &mut adj[a.0];
                    for (i, (&x, &gv)) in ta.data().iter().zip(g.iter()).enumerate() {
                        if x > 0.0 {
                            da[i] += gv;
                        }
                    }
                    adj[k] = g;
                }
                Op::Sigmoid(a) => {
                    let g = std::mem::take(&mut adj[k]);
                    let da = &mut adj[a.0];
                    for (i, (&s, &gv)) in val.data().iter().zip(g.iter()).enumerate() {
                        da[i] += gv * s * (1.0 - s);
                    }
                    adj[k] = g;
                }
                Op::SoftmaxRows(a) => {
                    let g = std::mem::take(&mut adj[k]);
                    let (n, c) = (val.rows(), val.cols());
                    let da = &mut adj[a.0];
                    for i in 0..n {
                        let p = val.row(i);
                        let gi = &g[i * c..(i + 1) * c];
                        let dot: f64 = p.iter().zip(gi.iter()).map(|(&pv, &gv)| pv * gv).sum();
                        for j in 0..c {
                            da[i * c + j] += p[j] * (gi[j] - dot);
                        }
                    }
                    adj[k] = g;
                }
                Op::Log(a) => {
                    let g = std::mem::take(&mut adj[k]);
                    let ta = &self.nodes[a.0].value;
                    let da = &mut adj[a.0];
                    for (i, (&x, &gv)) in ta.data().iter().zip(g.iter()).enumerate() {
                        if x >= LOG_FLOOR {
                            da[i] += gv / x;
                        }
                    }
                    adj[k] = g;
                }
                Op::Sum(a) => {
                    let g = adj[k][0];
                    let da = &mut adj[a.0];
                    for v in da.iter_mut() {
                        *v += g;
                    }
                }
                Op::Mean(a) => {
                    let g = adj[k][0];
                    let n = self.nodes[a.0].value.numel() as f64;
                    let da = &mut adj[a.0];
                    for v in da.iter_mut() {
                        *v += g / n;
                    }
                }
                Op::SumSq(a) => {
                    let g = adj[k][0];
                    let ta = &self.nodes[a.0].value;
                    let da = &mut adj[a.0];
                    for (v, &x) in da.iter_mut().zip(ta.data().iter()) {
                        *v += g * 2.0 * x;
                    }
                }
                Op::Hinge(a) => {
                    let g = std::mem::take(&mut adj[k]);
                    let ta = &self.nodes[a.0].value;
                    let da = &mut adj[a.0];
                    // hinge(t) = max(1-t, 0): derivative -1 where 1-t > 0,
                    // 0 elsewhere (including the kink).
                    for (i, (&t, &gv)) in ta.data().iter().zip(g.iter()).enumerate() {
                        if 1.0 - t > 0.0 {
                            da[i] -= gv;
                        }
                    }
                    adj[k] = g;
                }
                Op::Scale(a, c) => {
                    let g = std::mem::take(&mut adj[k]);
                    let da = &mut adj[a.0];
                    for (v, &gv) in da.iter_mut().zip(g.iter()) {
                        *v += c * gv;
                    }
                    adj[k] = g;
                }
                Op::ConcatCols(a, b) => {
                    let g = std::mem::take(&mut adj[k]);
                    let ca = self.nodes[a.0].value.cols();
                    let cb = self.nodes[b.0].value.cols();
                    let rows = self.nodes[a.0].value.rows();
                    {
                        let da = &mut adj[a.0];
                        for i in 0..rows {
                            for j in 0..ca {
                                da[i * ca + j] += g[i * (ca + cb) + j];
                            }
                        }
                    }
                    {
                        let db = &mut adj[b.0];
                        for i in 0..rows {
                            for j in 0..cb {
                                db[i * cb + j] += g[i * (ca + cb) + ca + j];
                            }
                        }
                    }
                    adj[k] = g;
                }
                Op::SelectRows(a, rows) => {
                    let g = std::mem::take(&mut adj[k]);
                    let c = self.nodes[a.0].value.cols();
                    let da = &mut adj[a.0];
                    for (out_i, &src) in rows.iter().enumerate() {
                        for j in 0..c {
                            da[src * c + j] += g[out_i * c + j];
                        }
                    }
                    adj[k] = g;
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { adj, shapes, reached })
    }

    /// Accumulate `g` (gradient of the broadcasted output) into the adjoint
    /// of `target`, contracting over the broadcast when `target` is a scalar.
    /// When `factor` is given the contribution is `g * factor` elementwise
    /// (the product rule), with `factor` possibly scalar.
    fn accumulate_broadcast(&self, adj: &mut [Vec<f64>], target: ValueId, g: &[f64], factor: Option<&Tensor>) {
        let tn = self.nodes[target.0].value.numel();
        match factor {
            None => {
                if tn == g.len() {
                    let da = &mut adj[target.0];
                    for (v, &gv) in da.iter_mut().zip(g.iter()) {
                        *v += gv;
                    }
                } else {
                    // target is the broadcast scalar
                    debug_assert_eq!(tn, 1);
                    adj[target.0][0] += g.iter().sum::<f64>();
                }
            }
            Some(f) => {
                let fd = f.data();
                if tn == g.len() {
                    let da = &mut adj[target.0];
                    if fd.len() == g.len() {
                        for i in 0..g.len() {
                            da[i] += g[i] * fd[i];
                        }
                    } else {
                        // partner was scalar
                        let s = fd[0];
                        for (v, &gv) in da.iter_mut().zip(g.iter()) {
                            *v += gv * s;
                        }
                    }
                } else {
                    debug_assert_eq!(tn, 1);
                    let mut s = 0.0;
                    for i in 0..g.len() {
                        s += g[i] * fd[i];
                    }
                    adj[target.0][0] += s;
                }
            }
        }
    }

    /// Gradient of a recorded scalar with respect to one interior activation,
    /// returned as data.
    ///
    /// No adjoint is stored anywhere on the tape or on any parameter: the
    /// caller receives the gradient tensor and nothing else, which is what
    /// lets the trainer use it as a perturbation direction without second-
    /// order effects.
    pub fn grad_wrt_activation(&self, out: ValueId, activation: ValueId) -> Result<ActivationGrad> {
        if activation.0 >= self.nodes.len() {
            return Err(Error::NotOnTape(activation.0, self.nodes.len()));
        }
        let grads = self.backward(out)?;
        let connected = grads.is_ancestor(activation);
        let grad = if connected {
            grads.wrt_tensor(activation)?
        } else {
            Tensor::zeros(self.nodes[activation.0].value.shape().to_vec())
        };
        Ok(ActivationGrad { grad, connected })
    }
}
