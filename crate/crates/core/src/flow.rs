//! Masked autoregressive flow over `vec(U)`.
//!
//! Each layer is an affine autoregressive map
//! `u_i = u0_i · exp(a_i(u0_<i)) + b_i(u0_<i)` whose shift `b` and log-scale
//! `a` come from a single-hidden-layer masked network (hidden width `2d`,
//! tanh). Coordinates follow the row-major order of `U`; every other layer
//! uses the reversed order. The map is evaluated in the sampling direction
//! in one pass, so `log|det J| = Σ_i a_i` at the layer input. Inversion is
//! coordinate-sequential and only needed for density evaluation.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::params::{join, leaf, Parameterized};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct MadeLayer {
    dim: usize,
    reversed: bool,
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    b2: Matrix,
    mask1: Arc<Matrix>,
    mask2: Arc<Matrix>,
}

/// Autoregressive rank of coordinate `i` (1-based) under the layer's order.
fn degree(i: usize, dim: usize, reversed: bool) -> usize {
    if reversed {
        dim - i
    } else {
        i + 1
    }
}

impl MadeLayer {
    fn masks(dim: usize, reversed: bool) -> (Arc<Matrix>, Arc<Matrix>) {
        let hidden = 2 * dim;
        let hidden_degree = |k: usize| {
            if dim > 1 {
                k % (dim - 1) + 1
            } else {
                dim
            }
        };
        let mask1 = Matrix::from_fn(hidden, dim, |k, i| {
            f64::from(u8::from(hidden_degree(k) >= degree(i, dim, reversed)))
        });
        let mask2 = Matrix::from_fn(2 * dim, hidden, |o, k| {
            f64::from(u8::from(degree(o % dim, dim, reversed) > hidden_degree(k)))
        });
        (Arc::new(mask1), Arc::new(mask2))
    }

    /// Identity-initialized layer: random masked input weights, zero output
    /// weights and biases.
    pub fn identity_init<R: Rng + ?Sized>(dim: usize, reversed: bool, rng: &mut R) -> Self {
        let hidden = 2 * dim;
        let (mask1, mask2) = Self::masks(dim, reversed);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let w1 = Matrix::from_fn(hidden, dim, |k, i| mask1.get(k, i) * normal.sample(rng));
        Self {
            dim,
            reversed,
            w1,
            b1: Matrix::zeros(hidden, 1),
            w2: Matrix::zeros(2 * dim, hidden),
            b2: Matrix::zeros(2 * dim, 1),
            mask1,
            mask2,
        }
    }

    /// Layer with random output weights of overall scale `out_scale`, used to
    /// exercise non-trivial flows.
    pub fn random<R: Rng + ?Sized>(dim: usize, reversed: bool, out_scale: f64, rng: &mut R) -> Self {
        let mut layer = Self::identity_init(dim, reversed, rng);
        let normal = Normal::new(0.0, out_scale).expect("valid std");
        let fan_in = Normal::new(0.0, out_scale / ((2 * dim) as f64).sqrt()).expect("valid std");
        let mask2 = layer.mask2.clone();
        layer.w2 = Matrix::from_fn(2 * dim, 2 * dim, |o, k| mask2.get(o, k) * fan_in.sample(rng));
        layer.b1 = Matrix::from_fn(2 * dim, 1, |_, _| normal.sample(rng));
        layer.b2 = Matrix::from_fn(2 * dim, 1, |_, _| normal.sample(rng));
        layer
    }

    /// Constant conditioner: `u = u0 · exp(log_scale) + shift`.
    pub fn affine(shift: &[f64], log_scale: &[f64]) -> Result<Self> {
        if shift.len() != log_scale.len() || shift.is_empty() {
            return Err(Error::dim("MadeLayer::affine", "shift and log-scale lengths differ"));
        }
        let dim = shift.len();
        let (mask1, mask2) = Self::masks(dim, false);
        let b2: Vec<f64> = shift.iter().chain(log_scale).copied().collect();
        Ok(Self {
            dim,
            reversed: false,
            w1: Matrix::zeros(2 * dim, dim),
            b1: Matrix::zeros(2 * dim, 1),
            w2: Matrix::zeros(2 * dim, 2 * dim),
            b2: Matrix::column(&b2),
            mask1,
            mask2,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Order in which coordinates are generated.
    fn order(&self) -> Vec<usize> {
        if self.reversed {
            (0..self.dim).rev().collect()
        } else {
            (0..self.dim).collect()
        }
    }

    /// Conditioner output `(shift, log_scale)` on plain matrices.
    fn conditioner(&self, u0: &Matrix) -> (Matrix, Matrix) {
        let w1 = self.w1.hadamard(&self.mask1).expect("mask shape");
        let w2 = self.w2.hadamard(&self.mask2).expect("mask shape");
        let mut h = w1.matmul_unchecked(u0);
        for i in 0..h.rows() {
            for j in 0..h.cols() {
                h.set(i, j, (h.get(i, j) + self.b1.get(i, 0)).tanh());
            }
        }
        let mut out = w2.matmul_unchecked(&h);
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) + self.b2.get(i, 0));
            }
        }
        (out.slice_rows(0, self.dim), out.slice_rows(self.dim, self.dim))
    }

    fn forward_var<'t>(&self, tape: &'t Tape, prefix: &str, trainable: bool, u0: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let w1 = leaf(tape, join(prefix, "w1"), &self.w1, trainable).hadamard(&tape.constant_shared(&self.mask1))?;
        let b1 = leaf(tape, join(prefix, "b1"), &self.b1, trainable);
        let w2 = leaf(tape, join(prefix, "w2"), &self.w2, trainable).hadamard(&tape.constant_shared(&self.mask2))?;
        let b2 = leaf(tape, join(prefix, "b2"), &self.b2, trainable);
        let h = w1.matmul(&u0)?.add_col(&b1)?.tanh();
        let out = w2.matmul(&h)?.add_col(&b2)?;
        let shift = out.slice_rows(0, self.dim)?;
        let log_scale = out.slice_rows(self.dim, self.dim)?;
        if !out.value().is_finite() {
            return Err(Error::numeric("flow conditioner produced a non-finite value"));
        }
        let u = u0.hadamard(&log_scale.exp())?.add(&shift)?;
        Ok((u, log_scale.sum_rows()))
    }

    fn inverse(&self, u: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let mut u0 = Matrix::zeros(u.rows(), u.cols());
        for i in self.order() {
            let (shift, log_scale) = self.conditioner(&u0);
            for j in 0..u.cols() {
                let s = log_scale.get(i, j).exp();
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::numeric(format!("flow scale underflow at coordinate {i}, column {j}")));
                }
                u0.set(i, j, (u.get(i, j) - shift.get(i, j)) / s);
            }
        }
        let (_, log_scale) = self.conditioner(&u0);
        let logdet = (0..u.cols())
            .map(|j| (0..self.dim).map(|i| log_scale.get(i, j)).sum())
            .collect();
        Ok((u0, logdet))
    }
}

impl Parameterized for MadeLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "w1"), &self.w1);
        f(&join(prefix, "b1"), &self.b1);
        f(&join(prefix, "w2"), &self.w2);
        f(&join(prefix, "b2"), &self.b2);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "w1"), &mut self.w1);
        f(&join(prefix, "b1"), &mut self.b1);
        f(&join(prefix, "w2"), &mut self.w2);
        f(&join(prefix, "b2"), &mut self.b2);
    }
}

/// Stack of `L` masked autoregressive layers; `L = 0` is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    dim: usize,
    layers: Vec<MadeLayer>,
}

impl FlowStack {
    pub fn identity(dim: usize) -> Self {
        Self { dim, layers: Vec::new() }
    }

    /// `depth` identity-initialized layers with alternating order.
    pub fn new<R: Rng + ?Sized>(dim: usize, depth: usize, rng: &mut R) -> Self {
        let layers = (0..depth).map(|l| MadeLayer::identity_init(dim, l % 2 == 1, rng)).collect();
        Self { dim, layers }
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, depth: usize, out_scale: f64, rng: &mut R) -> Self {
        let layers = (0..depth).map(|l| MadeLayer::random(dim, l % 2 == 1, out_scale, rng)).collect();
        Self { dim, layers }
    }

    pub fn from_layers(layers: Vec<MadeLayer>) -> Result<Self> {
        let dim = layers.first().map(|l| l.dim).ok_or_else(|| Error::param("empty layer list"))?;
        if layers.iter().any(|l| l.dim != dim) {
            return Err(Error::dim("FlowStack::from_layers", "layers disagree on dimension"));
        }
        Ok(Self { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    /// Analytic parameter total for a stack of the given shape.
    pub fn parameter_count_for(dim: usize, depth: usize) -> usize {
        let h = 2 * dim;
        depth * (h * dim + h + 2 * dim * h + 2 * dim)
    }

    /// Sampling direction on the tape: `u0` is `d × S` (one column per
    /// sample). Returns `T(u0)` and the `1 × S` row of log-Jacobians.
    pub fn forward_var<'t>(&self, tape: &'t Tape, prefix: &str, trainable: bool, u0: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        if u0.shape().0 != self.dim {
            return Err(Error::dim("flow forward", format!("input has {} rows, flow dim {}", u0.shape().0, self.dim)));
        }
        let mut u = u0;
        let mut logdet = tape.constant(Matrix::zeros(1, u0.shape().1));
        for (l, layer) in self.layers.iter().enumerate() {
            let (next, ld) = layer.forward_var(tape, &join(prefix, &l.to_string()), trainable, u)?;
            u = next;
            logdet = logdet.add(&ld)?;
        }
        Ok((u, logdet))
    }

    /// `(T(u0), log|det J_T(u0)|)` for a batch of columns.
    pub fn forward_batch(&self, u0: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let tape = Tape::new();
        let x = tape.constant(u0.clone());
        let (u, ld) = self.forward_var(&tape, "flow", false, x)?;
        let u = u.value().as_ref().clone();
        if !u.is_finite() {
            return Err(Error::numeric("flow output is not finite"));
        }
        Ok((u, ld.value().as_slice().to_vec()))
    }

    /// Forward map of a single inducing matrix, read in row-major order.
    pub fn forward_with_logdet(&self, u0: &Matrix) -> Result<(Matrix, f64)> {
        if u0.len() != self.dim {
            return Err(Error::dim("forward_with_logdet", format!("{} entries for flow dim {}", u0.len(), self.dim)));
        }
        let (u, ld) = self.forward_batch(&Matrix::column(u0.as_slice()))?;
        Ok((u.reshape(u0.rows(), u0.cols())?, ld[0]))
    }

    /// Inverse map of a batch of columns and the forward log-Jacobian at the
    /// recovered inputs.
    pub fn inverse_batch(&self, u: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let mut x = u.clone();
        let mut total = vec![0.0; u.cols()];
        for layer in self.layers.iter().rev() {
            let (x0, ld) = layer.inverse(&x)?;
            for (t, v) in total.iter_mut().zip(ld) {
                *t += v;
            }
            x = x0;
        }
        Ok((x, total))
    }

    /// `log q(u) = log q0(T⁻¹(u)) − log|det J_T(T⁻¹(u))|` for one point
    /// (any shape; read row-major).
    pub fn density_under_flow(&self, base_logdensity: &dyn Fn(&Matrix) -> f64, u: &Matrix) -> Result<f64> {
        if u.len() != self.dim {
            return Err(Error::dim("density_under_flow", format!("{} entries for flow dim {}", u.len(), self.dim)));
        }
        let (u0, ld) = self.inverse_batch(&Matrix::column(u.as_slice()))?;
        Ok(base_logdensity(&u0.reshape(u.rows(), u.cols())?) - ld[0])
    }
}

impl Parameterized for FlowStack {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit_params(&join(prefix, &l.to_string()), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params_mut(&join(prefix, &l.to_string()), f);
        }
    }
}

/// Standard normal log-density summed over all entries.
pub fn standard_normal_logpdf(u: &Matrix) -> f64 {
    let n = u.len() as f64;
    -0.5 * u.as_slice().iter().map(|v| v * v).sum::<f64>() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}
