//! Low-rank-plus-diagonal covariance factors `K = Z Zᵀ + diag(D²)`, the
//! projectors they induce, Kronecker log-determinants and matrix-normal
//! sampling.
//!
//! A factor for a target dimension `p` with `n` inducing dimensions stores
//! `Z ∈ ℝ^{n×p}`, so `K` is `n×n`. The row projector is `Zᵀ K⁻¹` (`p×n`) and
//! the column projector is `K⁻¹ Z` (`n×p`); together they map an inducing
//! matrix `U` to `T_row · U · T_col`.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{cho_solve, cholesky, cholesky_with_jitter, logdet_psd, Matrix};
use crate::params::{join, leaf, Parameterized};
use crate::rng::standard_normal_matrix;
use crate::tape::{Tape, Var};

/// Jitter added on the single permitted Cholesky retry.
pub const CHOLESKY_JITTER: f64 = 1e-8;

/// Initial value of the diagonal noise `D`.
pub const INITIAL_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Row,
    Col,
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp()).ln_1p()
    }
}

/// `Z Zᵀ + diag(D²)`.
pub fn assemble_k(z: &Matrix, d: &[f64]) -> Result<Matrix> {
    if d.len() != z.rows() {
        return Err(Error::dim(
            "assemble_k",
            format!("Z has {} rows but D has {} entries", z.rows(), d.len()),
        ));
    }
    if let Some(i) = d.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::param(format!("D[{i}] = {} must be positive", d[i])));
    }
    let mut k = z.matmul_t(z);
    for (i, di) in d.iter().enumerate() {
        k.set(i, i, k.get(i, i) + di * di);
    }
    Ok(k)
}

/// Learnable covariance factor. `D` is stored unconstrained and mapped
/// through softplus.
#[derive(Debug, Clone)]
pub struct CovarianceFactor {
    z: Matrix,
    d_raw: Matrix,
    cached_cholesky: OnceLock<Matrix>,
}

impl PartialEq for CovarianceFactor {
    fn eq(&self, other: &Self) -> bool {
        self.z == other.z && self.d_raw == other.d_raw
    }
}

impl CovarianceFactor {
    pub fn new(z: Matrix, d: &[f64]) -> Result<Self> {
        // validates D > 0 and the shapes
        assemble_k(&z, d)?;
        let d_raw = Matrix::column(&d.iter().map(|v| softplus_inverse(*v)).collect::<Vec<_>>());
        Ok(Self {
            z,
            d_raw,
            cached_cholesky: OnceLock::new(),
        })
    }

    /// `Z` entries drawn from `N(0, 1/inducing_dim)`, `D = 0.1`.
    pub fn init<R: Rng + ?Sized>(inducing_dim: usize, target_dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (inducing_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let z = Matrix::from_fn(inducing_dim, target_dim, |_, _| normal.sample(rng));
        Self::new(z, &vec![INITIAL_NOISE; inducing_dim]).expect("positive noise")
    }

    pub fn inducing_dim(&self) -> usize {
        self.z.rows()
    }

    pub fn target_dim(&self) -> usize {
        self.z.cols()
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn d(&self) -> Vec<f64> {
        self.d_raw.as_slice().iter().map(|v| softplus(*v)).collect()
    }

    pub fn assemble_k(&self) -> Result<Matrix> {
        assemble_k(&self.z, &self.d())
    }

    /// Cholesky factor of `K`, computed once and reused until the
    /// parameters change.
    pub fn cholesky(&self) -> Result<&Matrix> {
        if let Some(l) = self.cached_cholesky.get() {
            return Ok(l);
        }
        let l = cholesky_with_jitter(&self.assemble_k()?, CHOLESKY_JITTER)?;
        Ok(self.cached_cholesky.get_or_init(|| l))
    }

    pub fn has_cached_cholesky(&self) -> bool {
        self.cached_cholesky.get().is_some()
    }

    pub fn projector(&self, side: Side) -> Result<Matrix> {
        let kinv_z = cho_solve(self.cholesky()?, &self.z)?;
        Ok(match side {
            Side::Row => kinv_z.transpose(),
            Side::Col => kinv_z,
        })
    }

    /// Records `K` on the tape and returns the projector for `side`.
    pub fn projector_var<'t>(
        &self,
        tape: &'t Tape,
        prefix: &str,
        trainable: bool,
        side: Side,
    ) -> Result<Var<'t>> {
        Ok(self.projector_and_k_var(tape, prefix, trainable, side)?.0)
    }

    /// Projector for `side` together with the `K` node it was built from.
    pub fn projector_and_k_var<'t>(
        &self,
        tape: &'t Tape,
        prefix: &str,
        trainable: bool,
        side: Side,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let z = leaf(tape, join(prefix, "z"), &self.z, trainable);
        let d = leaf(tape, join(prefix, "d_raw"), &self.d_raw, trainable).softplus();
        let k = z.matmul(&z.t())?.add(&d.square().diag()?)?;
        let kinv_z = k.spd_solve(&z)?;
        let t = match side {
            Side::Row => kinv_z.t(),
            Side::Col => kinv_z,
        };
        Ok((t, k))
    }
}

impl Parameterized for CovarianceFactor {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "z"), &self.z);
        f(&join(prefix, "d_raw"), &self.d_raw);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.cached_cholesky = OnceLock::new();
        f(&join(prefix, "z"), &mut self.z);
        f(&join(prefix, "d_raw"), &mut self.d_raw);
    }
}

/// Row and column projectors for one low-rank factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorPair {
    pub t_row: Matrix,
    pub t_col: Matrix,
}

impl ProjectorPair {
    pub fn new(t_row: Matrix, t_col: Matrix) -> Self {
        Self { t_row, t_col }
    }

    pub fn from_factors(row: &CovarianceFactor, col: &CovarianceFactor) -> Result<Self> {
        Ok(Self {
            t_row: row.projector(Side::Row)?,
            t_col: col.projector(Side::Col)?,
        })
    }

    /// Shape `(t_row.rows, t_col.cols)` of the projected factor.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.t_row.rows(), self.t_col.cols())
    }

    /// `T_row · U · T_col`.
    pub fn apply(&self, u: &Matrix) -> Result<Matrix> {
        self.t_row.matmul(u)?.matmul(&self.t_col)
    }
}

/// `log|K_c ⊗ K_r| = c·log|K_r| + r·log|K_c|` with `r`, `c` the sides of
/// `K_r` and `K_c`.
pub fn kron_logdet(k_r: &Matrix, k_c: &Matrix) -> Result<f64> {
    let r = k_r.rows() as f64;
    let c = k_c.rows() as f64;
    Ok(c * logdet_psd(k_r)? + r * logdet_psd(k_c)?)
}

/// Draws `mean + L_r · E · L_cᵀ` with `E` standard normal, i.e. a sample of
/// `MN(mean, L_r L_rᵀ, L_c L_cᵀ)`.
pub fn sample_matrix_normal<R: Rng + ?Sized>(
    mean: &Matrix,
    row_chol: &Matrix,
    col_chol: &Matrix,
    rng: &mut R,
) -> Result<Matrix> {
    let (r, c) = mean.shape();
    if row_chol.shape() != (r, r) || col_chol.shape() != (c, c) {
        return Err(Error::dim(
            "sample_matrix_normal",
            format!(
                "mean {r}x{c}, row factor {:?}, column factor {:?}",
                row_chol.shape(),
                col_chol.shape()
            ),
        ));
    }
    let e = standard_normal_matrix(rng, r, c);
    mean.add(&row_chol.matmul(&e)?.matmul_t(col_chol))
}

/// Log-density of `U ~ MN(0, K_r, K_c)`.
pub fn matrix_normal_logpdf(u: &Matrix, k_r: &Matrix, k_c: &Matrix) -> Result<f64> {
    let (r, c) = u.shape();
    let l_r = cholesky(k_r)?;
    let l_c = cholesky(k_c)?;
    // tr(K_c⁻¹ Uᵀ K_r⁻¹ U)
    let a = cho_solve(&l_r, u)?;
    let b = cho_solve(&l_c, &u.transpose())?;
    let quad: f64 = a.as_slice().iter().zip(b.transpose().as_slice()).map(|(x, y)| x * y).sum();
    let n = (r * c) as f64;
    let logdet = kron_logdet(k_r, k_c)?;
    Ok(-0.5 * (quad + logdet + n * (2.0 * std::f64::consts::PI).ln()))
}
