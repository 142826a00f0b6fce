//! Tape-style reverse-mode differentiation over dense matrices.
//!
//! Operations are appended to a [`Graph`] as they run, so node order is a
//! topological order by construction. [`Graph::backward`] walks the nodes in
//! reverse exactly once and hands back the gradients of every parameter leaf.
//! Nodes built only from constants never receive gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};
use crate::geometry::{log_scale, quat_log_raw};

/// Variance floor used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a matrix recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Sin(usize),
    Exp(usize),
    Abs(usize),
    Transpose(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Sum(usize),
    SliceRows {
        src: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Reshape(usize),
    RowL2Normalize {
        src: usize,
        norms: Vec<f64>,
    },
    Hebbian {
        w: usize,
        k: usize,
        v: usize,
        eta: usize,
        literal: bool,
    },
    QuatLog(usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation graph.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of a leaf, `None` when the leaf was unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zeros when unreachable.
    pub fn wrt(&self, v: Var) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(v.rows, v.cols))
    }
}

fn broadcast_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<(usize, usize)> {
    if a.shape() == b.shape() || b.shape() == (1, 1) {
        Ok(a.shape())
    } else if a.shape() == (1, 1) {
        Ok(b.shape())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

/// Evaluates `f` elementwise with 1×1 operands broadcast.
fn broadcast_apply(a: &Matrix, b: &Matrix, shape: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Matrix {
    let n = shape.0 * shape.1;
    let av = a.as_slice();
    let bv = b.as_slice();
    let data = (0..n)
        .map(|i| {
            let x = if av.len() == 1 { av[0] } else { av[i] };
            let y = if bv.len() == 1 { bv[0] } else { bv[i] };
            f(x, y)
        })
        .collect();
    Matrix::from_vec(shape.0, shape.1, data).expect("shape computed above")
}

/// Folds a full-shape gradient back onto an operand that may have been a
/// broadcast scalar.
fn reduce_to(g: Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        g
    } else {
        Matrix::scalar(g.sum())
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

/// Derivative pieces of `c(s, w) = atan2(s, w) / s`:
/// returns `(dc/dw, (dc/ds) / s)`.
fn log_scale_partials(s: f64, w: f64) -> (f64, f64) {
    let r2 = s * s + w * w;
    let dc_dw = -1.0 / r2;
    let dc_ds_over_s = if s <= 1e-3 * w {
        let t2 = (s / w) * (s / w);
        (-2.0 / 3.0 + 0.8 * t2) / (w * w * w)
    } else {
        (w / r2 - s.atan2(w) / s) / (s * s)
    };
    (dc_dw, dc_ds_over_s)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        let (rows, cols) = value.shape();
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            graph: self.id,
            id: self.nodes.len() - 1,
            rows,
            cols,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.id >= self.nodes.len() {
            return Err(Error::Contract("variable belongs to a different graph".into()));
        }
        Ok(v.id)
    }

    fn val(&self, id: usize) -> &Matrix {
        &self.nodes[id].value
    }

    fn ng(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Records a constant; it never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.check(v).expect("foreign variable")].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.val(ia).matmul(self.val(ib))?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let shape = broadcast_shape(name, self.val(ia), self.val(ib))?;
        let out = broadcast_apply(self.val(ia), self.val(ib), shape, f);
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, op(ia, ib), ng))
    }

    /// `a + b`; either side may be 1×1 and is then broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("hadamard", a, b, |x, y| x * y, Op::Mul)
    }

    /// Adds a 1×n row to every row of `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (im, ir) = (self.check(m)?, self.check(row)?);
        let (mv, rv) = (self.val(im), self.val(ir));
        if rv.rows() != 1 || rv.cols() != mv.cols() {
            return Err(Error::shape("add_row", mv.shape(), rv.shape()));
        }
        let mut out = mv.clone();
        let r = rv.as_slice().to_vec();
        for i in 0..out.rows() {
            for (x, b) in out.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let ng = self.ng(im) || self.ng(ir);
        Ok(self.push(out, Op::AddRow(im, ir), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).map(|x| x * s);
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Scale(ia, s), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).map(f);
        let ng = self.ng(ia);
        Ok(self.push(out, op(ia), ng))
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sin, Op::Sin)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).transpose();
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Transpose(ia), ng))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let x = self.val(ia);
        if !x.is_finite() {
            return Err(Error::NonFinite("softmax_rows input".into()));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let ng = self.ng(ia);
        Ok(self.push(out, Op::SoftmaxRows(ia), ng))
    }

    /// Normalizes each row to zero mean and unit (population) variance, then
    /// applies `gain` and `bias` (both 1×cols).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let xv = self.val(ix);
        let n = xv.cols();
        if n < 2 {
            return Err(Error::Contract(format!("layer_norm needs at least 2 columns, got {n}")));
        }
        for (name, id) in [("layer_norm gain", ig), ("layer_norm bias", ib)] {
            if self.val(id).shape() != (1, n) {
                return Err(Error::shape(name, xv.shape(), self.val(id).shape()));
            }
        }
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for i in 0..xhat.rows() {
            let row = xhat.row_mut(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        let (gv, bv) = (self.val(ig).as_slice(), self.val(ib).as_slice());
        let mut out = xhat.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = *v * gv[j] + bv[j];
            }
        }
        let ng = self.ng(ix) || self.ng(ig) || self.ng(ib);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Sum of all entries, as 1×1.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = Matrix::scalar(self.val(ia).sum());
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Sum(ia), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = (a.rows * a.cols).max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let src = self.val(ia);
        if start + len > src.rows() {
            return Err(Error::Contract(format!(
                "row slice {start}..{} out of range for {} rows",
                start + len,
                src.rows()
            )));
        }
        let c = src.cols();
        let data = src.as_slice()[start * c..(start + len) * c].to_vec();
        let out = Matrix::from_vec(len, c, data)?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::SliceRows { src: ia, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let cols = parts.first().map(|p| p.cols).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &id in &ids {
            let v = self.val(id);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", (rows, cols), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.as_slice());
        }
        let ng = ids.iter().any(|&id| self.ng(id));
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(ids), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let rows = parts.first().map(|p| p.rows).unwrap_or(0);
        let mut cols = 0;
        for &id in &ids {
            let v = self.val(id);
            if v.rows() != rows {
                return Err(Error::shape("concat_cols", (rows, cols), v.shape()));
            }
            cols += v.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &id in &ids {
            let v = self.val(id);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let ng = ids.iter().any(|&id| self.ng(id));
        Ok(self.push(out, Op::ConcatCols(ids), ng))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).clone().reshaped(rows, cols)?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Reshape(ia), ng))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let mut out = self.val(ia).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 1e-12) {
                return Err(Error::DegenerateKey(i));
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let ng = self.ng(ia);
        Ok(self.push(out, Op::RowL2Normalize { src: ia, norms }, ng))
    }

    /// One Hebbian storage step: `W + η·k·(v − kᵀW)`, or `η·k·(v − kᵀW)`
    /// when `literal` is set. `k` is D×1, `v` is 1×D, `eta` is 1×1.
    pub fn hebbian_step(&mut self, w: Var, k: Var, v: Var, eta: Var, literal: bool) -> Result<Var> {
        let (iw, ik, iv, ie) = (self.check(w)?, self.check(k)?, self.check(v)?, self.check(eta)?);
        let d = w.rows;
        if w.cols != d {
            return Err(Error::shape("hebbian_step (W)", w.shape(), (d, d)));
        }
        if k.shape() != (d, 1) {
            return Err(Error::shape("hebbian_step (k)", k.shape(), (d, 1)));
        }
        if v.shape() != (1, d) {
            return Err(Error::shape("hebbian_step (v)", v.shape(), (1, d)));
        }
        if eta.shape() != (1, 1) {
            return Err(Error::shape("hebbian_step (eta)", eta.shape(), (1, 1)));
        }
        let wv = self.val(iw);
        let kv = self.val(ik).as_slice();
        let eta_v = self.val(ie).item();
        let r = hebbian_residual(wv, kv, self.val(iv).as_slice());
        let mut out = if literal { Matrix::zeros(d, d) } else { wv.clone() };
        for i in 0..d {
            let s = eta_v * kv[i];
            if s == 0.0 {
                continue;
            }
            for (o, rj) in out.row_mut(i).iter_mut().zip(&r) {
                *o += s * rj;
            }
        }
        let ng = self.ng(iw) || self.ng(ik) || self.ng(iv) || self.ng(ie);
        Ok(self.push(
            out,
            Op::Hebbian {
                w: iw,
                k: ik,
                v: iv,
                eta: ie,
                literal,
            },
            ng,
        ))
    }

    /// Unit-quaternion log map applied to each row of a B×4 matrix of raw
    /// `(w, x, y, z)` quaternions. Rows are implicitly normalized and moved
    /// to the `w >= 0` hemisphere first.
    pub fn quat_log_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let src = self.val(ia);
        if src.cols() != 4 {
            return Err(Error::shape("quat_log_rows", src.shape(), (src.rows(), 4)));
        }
        let mut out = Matrix::zeros(src.rows(), 3);
        for i in 0..src.rows() {
            let r = src.row(i);
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm >= 1e-12) {
                return Err(Error::DegenerateQuaternion(norm));
            }
            let (l, _) = quat_log_raw([r[0], r[1], r[2], r[3]]);
            out.row_mut(i).copy_from_slice(&l);
        }
        let ng = self.ng(ia);
        Ok(self.push(out, Op::QuatLog(ia), ng))
    }

    /// Reverse sweep from a 1×1 loss. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if loss.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                loss.rows, loss.cols
            )));
        }
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this graph".into()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Matrix::scalar(1.0));

        for id in (0..=il).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, g, &mut grads);
        }
        // Only parameter leaves keep their gradients.
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                *slot = None;
            }
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn propagate(&self, id: usize, g: Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[id];
        let mut send = |target: usize, m: Matrix| {
            if !self.nodes[target].needs_grad {
                return;
            }
            match &mut grads[target] {
                Some(acc) => acc.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    send(*a, gemm(&g, false, self.val(*b), true));
                }
                if self.ng(*b) {
                    send(*b, gemm(self.val(*a), true, &g, false));
                }
            }
            Op::Add(a, b) => {
                send(*a, reduce_to(g.clone(), self.val(*a).shape()));
                send(*b, reduce_to(g, self.val(*b).shape()));
            }
            Op::Sub(a, b) => {
                send(*a, reduce_to(g.clone(), self.val(*a).shape()));
                send(*b, reduce_to(g.map(|x| -x), self.val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let shape = g.shape();
                if self.ng(*a) {
                    let ga = broadcast_apply(&g, bv, shape, |x, y| x * y);
                    send(*a, reduce_to(ga, av.shape()));
                }
                if self.ng(*b) {
                    let gb = broadcast_apply(&g, av, shape, |x, y| x * y);
                    send(*b, reduce_to(gb, bv.shape()));
                }
            }
            Op::AddRow(m, r) => {
                if self.ng(*r) {
                    let mut row = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (acc, x) in row.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *acc += x;
                        }
                    }
                    send(*r, row);
                }
                send(*m, g);
            }
            Op::Scale(a, s) => send(*a, g.map(|x| x * s)),
            Op::Relu(a) => {
                let gx = g.zip_map(self.val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                send(*a, gx);
            }
            Op::Sigmoid(a) => {
                let gx = g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y));
                send(*a, gx);
            }
            Op::Sin(a) => send(*a, g.zip_map(self.val(*a), |gi, x| gi * x.cos())),
            Op::Exp(a) => send(*a, g.zip_map(&node.value, |gi, y| gi * y)),
            Op::Abs(a) => {
                let gx = g.zip_map(self.val(*a), |gi, x| {
                    if x > 0.0 {
                        gi
                    } else if x < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                send(*a, gx);
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut gx = g.clone();
                for i in 0..y.rows() {
                    let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                    for (o, yv) in gx.row_mut(i).iter_mut().zip(y.row(i)) {
                        *o = yv * (*o - dot);
                    }
                }
                send(*a, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = xhat.cols();
                let gv = self.val(*gain).as_slice();
                if self.ng(*gain) {
                    let mut dg = Matrix::zeros(1, n);
                    for i in 0..g.rows() {
                        for ((acc, gi), xh) in dg.as_mut_slice().iter_mut().zip(g.row(i)).zip(xhat.row(i)) {
                            *acc += gi * xh;
                        }
                    }
                    send(*gain, dg);
                }
                if self.ng(*bias) {
                    let mut db = Matrix::zeros(1, n);
                    for i in 0..g.rows() {
                        for (acc, gi) in db.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *acc += gi;
                        }
                    }
                    send(*bias, db);
                }
                if self.ng(*x) {
                    let mut dx = Matrix::zeros(g.rows(), n);
                    for i in 0..g.rows() {
                        let dxh: Vec<f64> = g.row(i).iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxh.iter().zip(xhat.row(i)).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((o, d), xh) in dx.row_mut(i).iter_mut().zip(&dxh).zip(xhat.row(i)) {
                            *o = inv_std[i] * (d - mean_d - xh * mean_dx);
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.val(*a).shape();
                send(*a, Matrix::filled(r, c, g.item()));
            }
            Op::SliceRows { src, start } => {
                let sv = self.val(*src);
                let mut full = Matrix::zeros(sv.rows(), sv.cols());
                let c = sv.cols();
                full.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                send(*src, full);
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                let c = g.cols();
                for &p in ids {
                    let len = self.val(p).len();
                    if self.ng(p) {
                        let data = g.as_slice()[offset..offset + len].to_vec();
                        send(p, Matrix::from_vec(len / c.max(1), c, data).expect("slice of grad"));
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(ids) => {
                let mut offset = 0;
                for &p in ids {
                    let pc = self.val(p).cols();
                    if self.ng(p) {
                        let mut part = Matrix::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            part.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        send(p, part);
                    }
                    offset += pc;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.val(*a).shape();
                send(*a, g.reshaped(r, c).expect("same length"));
            }
            Op::RowL2Normalize { src, norms } => {
                let y = &node.value;
                let mut gx = g.clone();
                for i in 0..y.rows() {
                    let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                    for (o, yv) in gx.row_mut(i).iter_mut().zip(y.row(i)) {
                        *o = (*o - yv * dot) / norms[i];
                    }
                }
                send(*src, gx);
            }
            Op::Hebbian { w, k, v, eta, literal } => self.hebbian_backward(&g, (*w, *k, *v, *eta, *literal), &mut send),
            Op::QuatLog(a) => {
                let src = self.val(*a);
                let mut gx = Matrix::zeros(src.rows(), 4);
                for i in 0..src.rows() {
                    let r = src.row(i);
                    let sign = if r[0] < 0.0 { -1.0 } else { 1.0 };
                    let w = sign * r[0];
                    let v = [sign * r[1], sign * r[2], sign * r[3]];
                    let s = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    let c = log_scale(s, w);
                    let (dc_dw, dc_ds_s) = log_scale_partials(s, w);
                    let gi = g.row(i);
                    let gdotv = gi[0] * v[0] + gi[1] * v[1] + gi[2] * v[2];
                    // h = c·v: dh/dw = v·dc/dw, dh/dv_j = c·e_j + v·(dc/ds)(v_j/s)
                    let out = gx.row_mut(i);
                    out[0] = sign * gdotv * dc_dw;
                    for j in 0..3 {
                        out[j + 1] = sign * (c * gi[j] + gdotv * dc_ds_s * v[j]);
                    }
                }
                send(*a, gx);
            }
        }
    }

    fn hebbian_backward(
        &self,
        g: &Matrix,
        (w, k, v, eta, literal): (usize, usize, usize, usize, bool),
        send: &mut impl FnMut(usize, Matrix),
    ) {
        let wv = self.val(w);
        let kv = self.val(k).as_slice();
        let eta_v = self.val(eta).item();
        let d = kv.len();

        // kᵀG, the 1×D row shared by several terms.
        let mut ktg = vec![0.0; d];
        for i in 0..d {
            if kv[i] == 0.0 {
                continue;
            }
            for (acc, gij) in ktg.iter_mut().zip(g.row(i)) {
                *acc += kv[i] * gij;
            }
        }

        if self.ng(w) {
            // dW_prev = [G] − η·k·(kᵀG)
            let mut dw = if literal { Matrix::zeros(d, d) } else { g.clone() };
            for i in 0..d {
                let s = -eta_v * kv[i];
                if s == 0.0 {
                    continue;
                }
                for (o, t) in dw.row_mut(i).iter_mut().zip(&ktg) {
                    *o += s * t;
                }
            }
            send(w, dw);
        }
        if self.ng(v) {
            send(v, Matrix::row_vector(ktg.iter().map(|x| eta_v * x).collect()));
        }
        let needs_r = self.ng(k) || self.ng(eta);
        if needs_r {
            let r = hebbian_residual(wv, kv, self.val(v).as_slice());
            // G·rᵀ
            let grt: Vec<f64> = (0..d)
                .map(|i| g.row(i).iter().zip(&r).map(|(a, b)| a * b).sum())
                .collect();
            if self.ng(k) {
                // dk = η(G·rᵀ − W·(Gᵀk)); Gᵀk is (kᵀG)ᵀ
                let dk: Vec<f64> = (0..d)
                    .map(|i| {
                        let wk: f64 = wv.row(i).iter().zip(&ktg).map(|(a, b)| a * b).sum();
                        eta_v * (grt[i] - wk)
                    })
                    .collect();
                send(k, Matrix::column_vector(dk));
            }
            if self.ng(eta) {
                let de: f64 = kv.iter().zip(&grt).map(|(a, b)| a * b).sum();
                send(eta, Matrix::scalar(de));
            }
        }
    }
}

/// `v − kᵀW` as a row.
fn hebbian_residual(w: &Matrix, k: &[f64], v: &[f64]) -> Vec<f64> {
    let mut r = v.to_vec();
    for (i, &ki) in k.iter().enumerate() {
        if ki == 0.0 {
            continue;
        }
        for (o, wij) in r.iter_mut().zip(w.row(i)) {
            *o -= ki * wij;
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::row_vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).as_slice(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Matrix::scalar(0.0));
        let s = g.sin(z).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
        let a = g.constant(Matrix::row_vector(vec![2.0, 3.0]));
        let b = g.constant(Matrix::row_vector(vec![4.0, 5.0]));
        let h = g.hadamard(a, b).unwrap();
        assert_eq!(g.value(h).as_slice(), &[8.0, 15.0]);
    }

    #[test]
    fn binary_shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros(2, 2));
        let b = g.constant(Matrix::zeros(2, 3));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        let s = g.constant(Matrix::scalar(2.0));
        assert_eq!(g.hadamard(a, s).unwrap().shape(), (2, 2));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let m = g.constant(Matrix::from_rows(&[&[0.0, 0.0], &[1000.0, 1000.0], &[0.0, 3f64.ln()]]));
        let s = g.softmax_rows(m).unwrap();
        let v = g.value(s);
        assert!((v.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((v.get(1, 1) - 0.5).abs() < 1e-15);
        assert!((v.get(2, 0) - 0.25).abs() < 1e-12);
        assert!((v.get(2, 1) - 0.75).abs() < 1e-12);
        let bad = g.constant(Matrix::row_vector(vec![f64::NAN, 0.0]));
        assert!(matches!(g.softmax_rows(bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_rows(&[&[5., 5., 5., 5.]]));
        let gain = g.constant(Matrix::filled(1, 4, 1.0));
        let bias = g.constant(Matrix::zeros(1, 4));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).max_abs() == 0.0);

        let x = g.constant(Matrix::row_vector(vec![1., 3.]));
        let gain = g.constant(Matrix::filled(1, 2, 1.0));
        let bias = g.constant(Matrix::zeros(1, 2));
        let y = g.layer_norm(x, gain, bias).unwrap();
        // var = 1, so (x - 2) / sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).get(0, 0) + expect).abs() < 1e-15);
        assert!((g.value(y).get(0, 1) - expect).abs() < 1e-15);

        let zero_gain = g.constant(Matrix::zeros(1, 2));
        let b = g.constant(Matrix::row_vector(vec![0.3, -0.7]));
        let y = g.layer_norm(x, zero_gain, b).unwrap();
        assert_eq!(g.value(y).as_slice(), &[0.3, -0.7]);

        let narrow = g.constant(Matrix::zeros(3, 1));
        let g1 = g.constant(Matrix::zeros(1, 1));
        assert!(g.layer_norm(narrow, g1, g1).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Matrix::filled(3, 2, 0.7));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x), Matrix::filled(3, 2, 1.0));
    }

    #[test]
    fn backward_of_quadratic() {
        let mut g = Graph::new();
        let x = g.param(Matrix::column_vector(vec![1.0, 2.0]));
        let xt = g.transpose(x).unwrap();
        let q = g.matmul(xt, x).unwrap();
        let grads = g.backward(q).unwrap();
        assert_eq!(grads.wrt(x).as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Matrix::scalar(1.0));
        let y = g.scale(x, 2.0).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(Matrix::zeros(2, 1));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Matrix::scalar(1.0));
        let unused = g.param(Matrix::zeros(2, 2));
        let y = g.exp(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused), Matrix::zeros(2, 2));
    }

    #[test]
    fn foreign_variables_are_rejected() {
        let mut a = Graph::new();
        let mut b = Graph::new();
        let x = a.param(Matrix::scalar(1.0));
        assert!(b.relu(x).is_err());
    }

    #[test]
    fn quat_log_raw_matches_arccos_form() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let (l, _) = quat_log_raw([h, h, 0.0, 0.0]);
        assert!((l[0] - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
        // scale invariance and hemisphere flip
        let (l2, sign) = quat_log_raw([-3.0 * h, -3.0 * h, 0.0, 0.0]);
        assert_eq!(sign, -1.0);
        assert!((l2[0] - l[0]).abs() < 1e-15);
        let (l0, _) = quat_log_raw([2.0, 0.0, 0.0, 0.0]);
        assert_eq!(l0, [0.0; 3]);
    }
}
