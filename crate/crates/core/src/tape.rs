//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Leaves
//! are either named parameters (registered with [`Tape::param`], which
//! receive gradients) or constants (never differentiated). Calling
//! [`Tape::grad`] on a scalar output walks the recording once in reverse
//! order and returns the gradient of every registered parameter.
//!
//! One tape belongs to one training step; it is not `Sync`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{cho_solve, cholesky, logdet_from_cholesky, Matrix};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    AddColBroadcast(usize, usize),
    AddRowBroadcast(usize, usize),
    MulColBroadcast(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Softplus(usize),
    Sigmoid(usize),
    ClampMax(usize, f64),
    Transpose(usize),
    Reshape(usize),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Sum(usize),
    SumRows(usize),
    Diag(usize),
    SoftmaxRows(usize),
    BlockAttention { q: usize, k: usize, v: usize, block: usize, scale: f64, attn: Arc<Matrix> },
    CrossEntropy { logits: usize, targets: Arc<Matrix>, probs: Arc<Matrix> },
    SpdSolve { k: usize, b: usize, chol: Arc<Matrix> },
    LogDetSpd { k: usize, chol: Arc<Matrix> },
}

struct Node {
    value: Arc<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Recording of primitive operations plus the registry of named leaves.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, usize)>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({r}x{c})", self.id)
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, s: f64) {
        for g in self.map.values_mut() {
            for v in g.as_mut_slice() {
                *v *= s;
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn value_of(&self, id: usize) -> Arc<Matrix> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Registers a named, differentiable leaf.
    pub fn param(&self, name: impl Into<String>, value: &Matrix) -> Var<'_> {
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.borrow_mut().push((name.into(), v.id));
        v
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Records a constant that shares storage with the caller.
    pub fn constant_shared(&self, value: &Arc<Matrix>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::clone(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Matrix::scalar(v))
    }

    /// Names of registered parameters, in registration order.
    pub fn param_names(&self) -> Vec<String> {
        self.params.borrow().iter().map(|(n, _)| n.clone()).collect()
    }

    /// Reverse-mode gradients of the scalar `output` with respect to every
    /// registered parameter. Parameters the output does not depend on get
    /// zero gradients.
    pub fn grad(&self, output: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(output.tape, self) {
            return Err(Error::Usage("output was not recorded on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if output.id >= nodes.len() {
            return Err(Error::Usage("unknown node".into()));
        }
        if nodes[output.id].value.shape() != (1, 1) {
            let (r, c) = nodes[output.id].value.shape();
            return Err(Error::Usage(format!("gradient requested of a {r}x{c} output")));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.id + 1];
        grads[output.id] = Some(Matrix::scalar(1.0));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backward_node(&nodes, node, &g, &mut grads);
        }

        let mut map = BTreeMap::new();
        for (name, id) in self.params.borrow().iter() {
            let g = if *id <= output.id {
                grads[*id].take()
            } else {
                None
            };
            let (r, c) = nodes[*id].value.shape();
            let g = g.unwrap_or_else(|| Matrix::zeros(r, c));
            match map.get_mut(name) {
                Some(acc) => Matrix::add_assign_unchecked(acc, &g),
                None => {
                    map.insert(name.clone(), g);
                }
            }
        }
        Ok(Gradients { map })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], nodes: &[Node], id: usize, g: Matrix) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign_unchecked(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
    let val = |id: usize| -> &Matrix { &nodes[id].value };
    let rg = |id: usize| nodes[id].requires_grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if rg(*a) {
                accumulate(grads, nodes, *a, g.matmul_t(val(*b)));
            }
            if rg(*b) {
                accumulate(grads, nodes, *b, val(*a).t_matmul(g));
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.scale(-1.0));
        }
        Op::Hadamard(a, b) => {
            if rg(*a) {
                accumulate(grads, nodes, *a, g.hadamard(val(*b)).expect("shape"));
            }
            if rg(*b) {
                accumulate(grads, nodes, *b, g.hadamard(val(*a)).expect("shape"));
            }
        }
        Op::AddColBroadcast(a, v) => {
            accumulate(grads, nodes, *a, g.clone());
            if rg(*v) {
                let sums: Vec<f64> = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
                accumulate(grads, nodes, *v, Matrix::column(&sums));
            }
        }
        Op::AddRowBroadcast(a, v) => {
            accumulate(grads, nodes, *a, g.clone());
            if rg(*v) {
                let mut sums = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (s, x) in sums.iter_mut().zip(g.row(i)) {
                        *s += x;
                    }
                }
                accumulate(grads, nodes, *v, Matrix::from_vec(1, g.cols(), sums));
            }
        }
        Op::MulColBroadcast(a, v) => {
            let av = val(*a);
            let vv = val(*v);
            if rg(*a) {
                accumulate(grads, nodes, *a, Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * vv.get(i, 0)));
            }
            if rg(*v) {
                let s: Vec<f64> = (0..g.rows())
                    .map(|i| g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum())
                    .collect();
                accumulate(grads, nodes, *v, Matrix::column(&s));
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.scale(*c)),
        Op::ScaleBy(a, s) => {
            let sv = val(*s).get(0, 0);
            if rg(*a) {
                accumulate(grads, nodes, *a, g.scale(sv));
            }
            if rg(*s) {
                let d: f64 = g.as_slice().iter().zip(val(*a).as_slice()).map(|(x, y)| x * y).sum();
                accumulate(grads, nodes, *s, Matrix::scalar(d));
            }
        }
        Op::Offset(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::Exp(a) => accumulate(grads, nodes, *a, g.hadamard(out).expect("shape")),
        Op::Log(a) => accumulate(grads, nodes, *a, g.zip_div(val(*a))),
        Op::Tanh(a) => {
            let d = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                let t = out.get(i, j);
                g.get(i, j) * (1.0 - t * t)
            });
            accumulate(grads, nodes, *a, d);
        }
        Op::Softplus(a) => {
            let x = val(*a);
            let d = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * sigmoid(x.get(i, j)));
            accumulate(grads, nodes, *a, d);
        }
        Op::Sigmoid(a) => {
            let d = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                let s = out.get(i, j);
                g.get(i, j) * s * (1.0 - s)
            });
            accumulate(grads, nodes, *a, d);
        }
        Op::ClampMax(a, max) => {
            let x = val(*a);
            let d = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                if x.get(i, j) <= *max {
                    g.get(i, j)
                } else {
                    0.0
                }
            });
            accumulate(grads, nodes, *a, d);
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose()),
        Op::Reshape(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, nodes, *a, Matrix::from_vec(r, c, g.as_slice().to_vec()));
        }
        Op::SliceCols(a, start) => {
            let (r, c) = val(*a).shape();
            let mut d = Matrix::zeros(r, c);
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    d.set(i, start + j, g.get(i, j));
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::SliceRows(a, start) => {
            let (r, c) = val(*a).shape();
            let mut d = Matrix::zeros(r, c);
            d.as_mut_slice()[start * c..(start + g.rows()) * c].copy_from_slice(g.as_slice());
            accumulate(grads, nodes, *a, d);
        }
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, nodes, *a, Matrix::filled(r, c, g.get(0, 0)));
        }
        Op::SumRows(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, nodes, *a, Matrix::from_fn(r, c, |_, j| g.get(0, j)));
        }
        Op::Diag(v) => {
            let n = g.rows();
            let d: Vec<f64> = (0..n).map(|i| g.get(i, i)).collect();
            accumulate(grads, nodes, *v, Matrix::column(&d));
        }
        Op::SoftmaxRows(a) => {
            let d = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                let dot: f64 = g.row(i).iter().zip(out.row(i)).map(|(x, y)| x * y).sum();
                out.get(i, j) * (g.get(i, j) - dot)
            });
            accumulate(grads, nodes, *a, d);
        }
        Op::BlockAttention { q, k, v, block, scale, attn } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (w, cols) = g.shape();
            let t = *block;
            let mut dq = Matrix::zeros(qv.rows(), cols);
            let mut dk = Matrix::zeros(kv.rows(), cols);
            let mut dv = Matrix::zeros(w, cols);
            let mut ds = vec![0.0; t * t];
            for c0 in (0..cols).step_by(t) {
                for i in 0..t {
                    let mut dot = 0.0;
                    for j in 0..t {
                        let a = attn.get(i, c0 + j);
                        let da: f64 = (0..w).map(|f| g.get(f, c0 + i) * vv.get(f, c0 + j)).sum();
                        ds[i * t + j] = da;
                        dot += da * a;
                        for f in 0..w {
                            dv.set(f, c0 + j, dv.get(f, c0 + j) + g.get(f, c0 + i) * a);
                        }
                    }
                    for j in 0..t {
                        ds[i * t + j] = attn.get(i, c0 + j) * (ds[i * t + j] - dot) * scale;
                    }
                }
                for i in 0..t {
                    for j in 0..t {
                        let d = ds[i * t + j];
                        for f in 0..qv.rows() {
                            dq.set(f, c0 + i, dq.get(f, c0 + i) + d * kv.get(f, c0 + j));
                            dk.set(f, c0 + j, dk.get(f, c0 + j) + d * qv.get(f, c0 + i));
                        }
                    }
                }
            }
            accumulate(grads, nodes, *q, dq);
            accumulate(grads, nodes, *k, dk);
            accumulate(grads, nodes, *v, dv);
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let n = probs.cols() as f64;
            let gs = g.get(0, 0) / n;
            let (k, cols) = probs.shape();
            let mut d = Matrix::zeros(k, cols);
            for j in 0..cols {
                let tsum: f64 = (0..k).map(|i| targets.get(i, j)).sum();
                for i in 0..k {
                    d.set(i, j, gs * (probs.get(i, j) * tsum - targets.get(i, j)));
                }
            }
            accumulate(grads, nodes, *logits, d);
        }
        Op::SpdSolve { k, b, chol } => {
            // X = K⁻¹B: dB = K⁻¹G, dK = -dB Xᵀ
            let db = cho_solve(chol, g).expect("solve with cached factor");
            if rg(*k) {
                accumulate(grads, nodes, *k, db.matmul_t(out).scale(-1.0));
            }
            if rg(*b) {
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::LogDetSpd { k, chol } => {
            let n = chol.rows();
            let inv = cho_solve(chol, &Matrix::identity(n)).expect("solve with cached factor");
            accumulate(grads, nodes, *k, inv.scale(g.get(0, 0)));
        }
    }
}

impl Matrix {
    fn zip_div(&self, other: &Matrix) -> Matrix {
        Matrix::from_fn(self.rows(), self.cols(), |i, j| self.get(i, j) / other.get(i, j))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Matrix> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    /// Value of a 1×1 variable.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.shape(), (1, 1));
        v.get(0, 0)
    }

    fn unary(&self, value: Matrix, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.tape.rg(self.id))
    }

    fn binary(&self, other: &Var<'t>, value: Matrix, op: Op) -> Var<'t> {
        let rg = self.tape.rg(self.id) || self.tape.rg(other.id);
        self.tape.push(value, op, rg)
    }

    fn check_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Usage("operands live on different tapes".into()))
        }
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other)?;
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other)?;
        let v = self.value().add(&other.value())?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other)?;
        let v = self.value().sub(&other.value())?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn hadamard(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other)?;
        let v = self.value().hadamard(&other.value())?;
        Ok(self.binary(other, v, Op::Hadamard(self.id, other.id)))
    }

    /// Adds the `rows × 1` vector `v` to every column.
    pub fn add_col(&self, v: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(v)?;
        let a = self.value();
        let vv = v.value();
        if vv.shape() != (a.rows(), 1) {
            return Err(Error::dim("add_col", format!("{:?} vs column {:?}", a.shape(), vv.shape())));
        }
        let out = Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + vv.get(i, 0));
        Ok(self.binary(v, out, Op::AddColBroadcast(self.id, v.id)))
    }

    /// Adds the `1 × cols` vector `v` to every row.
    pub fn add_row(&self, v: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(v)?;
        let a = self.value();
        let vv = v.value();
        if vv.shape() != (1, a.cols()) {
            return Err(Error::dim("add_row", format!("{:?} vs row {:?}", a.shape(), vv.shape())));
        }
        let out = Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + vv.get(0, j));
        Ok(self.binary(v, out, Op::AddRowBroadcast(self.id, v.id)))
    }

    /// Multiplies row `i` of every column by `v[i]`.
    pub fn mul_col(&self, v: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(v)?;
        let a = self.value();
        let vv = v.value();
        if vv.shape() != (a.rows(), 1) {
            return Err(Error::dim("mul_col", format!("{:?} vs column {:?}", a.shape(), vv.shape())));
        }
        let out = Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * vv.get(i, 0));
        Ok(self.binary(v, out, Op::MulColBroadcast(self.id, v.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(self.value().scale(c), Op::Scale(self.id, c))
    }

    /// Multiplies by a 1×1 variable.
    pub fn scale_by(&self, s: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(s)?;
        if s.shape() != (1, 1) {
            return Err(Error::dim("scale_by", format!("scalar operand is {:?}", s.shape())));
        }
        let v = self.value().scale(s.item());
        Ok(self.binary(s, v, Op::ScaleBy(self.id, s.id)))
    }

    pub fn offset(&self, c: f64) -> Var<'t> {
        self.unary(self.value().map(|v| v + c), Op::Offset(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(self.value().map(f64::ln), Op::Log(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(self.value().map(f64::tanh), Op::Tanh(self.id))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(self.value().map(softplus), Op::Softplus(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(self.value().map(sigmoid), Op::Sigmoid(self.id))
    }

    /// Elementwise `min(x, max)`; the gradient passes where `x <= max`.
    pub fn clamp_max(&self, max: f64) -> Var<'t> {
        self.unary(self.value().map(|v| v.min(max)), Op::ClampMax(self.id, max))
    }

    pub fn square(&self) -> Var<'t> {
        self.hadamard(self).expect("same shape")
    }

    pub fn t(&self) -> Var<'t> {
        self.unary(self.value().transpose(), Op::Transpose(self.id))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let v = self.value().reshape(rows, cols)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        if start + len > a.cols() {
            return Err(Error::dim("slice_cols", format!("[{start}, {}) of {} columns", start + len, a.cols())));
        }
        Ok(self.unary(a.slice_cols(start, len), Op::SliceCols(self.id, start)))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        if start + len > a.rows() {
            return Err(Error::dim("slice_rows", format!("[{start}, {}) of {} rows", start + len, a.rows())));
        }
        Ok(self.unary(a.slice_rows(start, len), Op::SliceRows(self.id, start)))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Matrix::scalar(self.value().sum()), Op::Sum(self.id))
    }

    /// Column sums as a `1 × cols` row.
    pub fn sum_rows(&self) -> Var<'t> {
        let a = self.value();
        let mut s = vec![0.0; a.cols()];
        for i in 0..a.rows() {
            for (acc, v) in s.iter_mut().zip(a.row(i)) {
                *acc += v;
            }
        }
        self.unary(Matrix::from_vec(1, a.cols(), s), Op::SumRows(self.id))
    }

    /// `n × 1` column to an `n × n` diagonal matrix.
    pub fn diag(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.cols() != 1 {
            return Err(Error::dim("diag", format!("expected a column, got {:?}", a.shape())));
        }
        Ok(self.unary(Matrix::diag(a.as_slice()), Op::Diag(self.id)))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&self) -> Var<'t> {
        let a = self.value();
        let mut out = Matrix::zeros(a.rows(), a.cols());
        for i in 0..a.rows() {
            let row = a.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for (j, v) in row.iter().enumerate() {
                out.set(i, j, (v - mx).exp() / z);
            }
        }
        self.unary(out, Op::SoftmaxRows(self.id))
    }

    /// Scaled dot-product attention applied independently to consecutive
    /// groups of `block` columns (one group per sequence). `self` holds the
    /// queries, `k` the keys and `v` the values, one column per token; the
    /// result has the shape of `v`.
    pub fn block_attention(&self, k: &Var<'t>, v: &Var<'t>, block: usize, scale: f64) -> Result<Var<'t>> {
        self.check_tape(k)?;
        self.check_tape(v)?;
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        same_shape("block_attention", &qv, &kv)?;
        let cols = qv.cols();
        if vv.cols() != cols || block == 0 || cols % block != 0 {
            return Err(Error::dim(
                "block_attention",
                format!("{cols} query columns, {} value columns, block {block}", vv.cols()),
            ));
        }
        let t = block;
        let mut attn = Matrix::zeros(t, cols);
        let mut out = Matrix::zeros(vv.rows(), cols);
        let mut row = vec![0.0; t];
        for c0 in (0..cols).step_by(t) {
            for i in 0..t {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = scale * (0..qv.rows()).map(|f| qv.get(f, c0 + i) * kv.get(f, c0 + j)).sum::<f64>();
                }
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|r| (r - mx).exp()).sum();
                for (j, r) in row.iter().enumerate() {
                    let a = (r - mx).exp() / z;
                    attn.set(i, c0 + j, a);
                    for f in 0..vv.rows() {
                        out.set(f, c0 + i, out.get(f, c0 + i) + vv.get(f, c0 + j) * a);
                    }
                }
            }
        }
        let rg = self.tape.rg(self.id) || self.tape.rg(k.id) || self.tape.rg(v.id);
        let op = Op::BlockAttention { q: self.id, k: k.id, v: v.id, block, scale, attn: Arc::new(attn) };
        Ok(self.tape.push(out, op, rg))
    }

    /// Mean over columns of `-Σ_k t_k log softmax(z)_k`, where the logits
    /// are `k × n` (one column per item) and `targets` has the same shape.
    pub fn cross_entropy(&self, targets: &Matrix) -> Result<Var<'t>> {
        let z = self.value();
        same_shape("cross_entropy", &z, targets)?;
        let (k, n) = z.shape();
        if n == 0 {
            return Err(Error::param("cross_entropy over an empty batch"));
        }
        let mut probs = Matrix::zeros(k, n);
        let mut loss = 0.0;
        for j in 0..n {
            let mx = (0..k).map(|i| z.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..k).map(|i| (z.get(i, j) - mx).exp()).sum::<f64>().ln();
            for i in 0..k {
                let lp = z.get(i, j) - lse;
                probs.set(i, j, lp.exp());
                loss -= targets.get(i, j) * lp;
            }
        }
        Ok(self.unary(
            Matrix::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits: self.id,
                targets: Arc::new(targets.clone()),
                probs: Arc::new(probs),
            },
        ))
    }

    /// `K⁻¹ B` for symmetric positive definite `self = K`.
    pub fn spd_solve(&self, b: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(b)?;
        let k = self.value();
        let chol = cholesky(&k)?;
        let x = cho_solve(&chol, &b.value())?;
        Ok(self.binary(
            b,
            x,
            Op::SpdSolve {
                k: self.id,
                b: b.id,
                chol: Arc::new(chol),
            },
        ))
    }

    /// `log|K|` for symmetric positive definite `self = K`.
    pub fn logdet_spd(&self) -> Result<Var<'t>> {
        let chol = cholesky(&self.value())?;
        let ld = logdet_from_cholesky(&chol);
        Ok(self.unary(
            Matrix::scalar(ld),
            Op::LogDetSpd {
                k: self.id,
                chol: Arc::new(chol),
            },
        ))
    }
}
