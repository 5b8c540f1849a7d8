//! Variational base posterior over the inducing matrix and the KL terms of
//! the objective.
//!
//! `q₀(vec U₀) = N(m, diag σ²)` with `σ = min(exp(log_sigma), max_sd)`.
//! Vectors are read in row-major order of the `r_ind × c_ind` inducing
//! matrix, matching the flow's coordinate order.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowStack;
use crate::linalg::{cho_solve, cholesky, inverse_spd, logdet_from_cholesky, Matrix};
use crate::params::{join, leaf, Parameterized};
use crate::rng::standard_normal_matrix;
use crate::tape::{Tape, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct InducingPosterior {
    m: Matrix,
    log_sigma: Matrix,
    whitened: bool,
    max_sd: f64,
}

impl InducingPosterior {
    pub fn new(m: Matrix, log_sigma: Matrix, whitened: bool, max_sd: f64) -> Result<Self> {
        if m.shape() != log_sigma.shape() {
            return Err(Error::dim(
                "InducingPosterior::new",
                format!("mean {:?} vs log_sigma {:?}", m.shape(), log_sigma.shape()),
            ));
        }
        if !(max_sd > 0.0) || !max_sd.is_finite() {
            return Err(Error::param(format!("max_sd must be positive, got {max_sd}")));
        }
        if !m.is_finite() || !log_sigma.is_finite() {
            return Err(Error::param("posterior parameters must be finite"));
        }
        Ok(Self { m, log_sigma, whitened, max_sd })
    }

    /// Mean drawn from `N(0, mean_std²)`, every scale at `min(init_sd, max_sd)`.
    pub fn init<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        whitened: bool,
        max_sd: f64,
        init_sd: f64,
        mean_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(init_sd > 0.0) {
            return Err(Error::param("initial posterior scale must be positive"));
        }
        let m = if mean_std > 0.0 {
            let normal = Normal::new(0.0, mean_std).map_err(|e| Error::param(e.to_string()))?;
            Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
        } else {
            Matrix::zeros(rows, cols)
        };
        Self::new(m, Matrix::filled(rows, cols, init_sd.min(max_sd).ln()), whitened, max_sd)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.m.shape()
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn mean(&self) -> &Matrix {
        &self.m
    }

    pub fn log_sigma(&self) -> &Matrix {
        &self.log_sigma
    }

    pub fn whitened(&self) -> bool {
        self.whitened
    }

    pub fn max_sd(&self) -> f64 {
        self.max_sd
    }

    /// Effective per-entry standard deviations after clamping.
    pub fn sigma(&self) -> Matrix {
        self.log_sigma.map(|v| v.exp().min(self.max_sd))
    }

    pub fn m_var<'t>(&self, tape: &'t Tape, prefix: &str, trainable: bool) -> Var<'t> {
        leaf(tape, join(prefix, "m"), &self.m, trainable)
    }

    pub fn sigma_var<'t>(&self, tape: &'t Tape, prefix: &str, trainable: bool) -> Var<'t> {
        leaf(tape, join(prefix, "log_sigma"), &self.log_sigma, trainable)
            .exp()
            .clamp_max(self.max_sd)
    }

    /// `U₀ = m + σ ⊙ ε` for a standard-normal `ε` of the inducing shape.
    pub fn sample_base<R: Rng + ?Sized>(&self, rng: &mut R) -> Matrix {
        let (r, c) = self.shape();
        let eps = standard_normal_matrix(rng, r, c);
        let sigma = self.sigma();
        Matrix::from_fn(r, c, |i, j| self.m.get(i, j) + sigma.get(i, j) * eps.get(i, j))
    }

    /// `log q₀(u)` for a point of the inducing shape.
    pub fn base_logpdf(&self, u: &Matrix) -> f64 {
        let sigma = self.sigma();
        u.as_slice()
            .iter()
            .zip(self.m.as_slice())
            .zip(sigma.as_slice())
            .map(|((x, m), s)| {
                let z = (x - m) / s;
                -0.5 * z * z - s.ln() - 0.5 * LN_2PI
            })
            .sum()
    }
}

impl Parameterized for InducingPosterior {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "m"), &self.m);
        f(&join(prefix, "log_sigma"), &self.log_sigma);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "m"), &mut self.m);
        f(&join(prefix, "log_sigma"), &mut self.log_sigma);
    }
}

/// Conditional-noise scale λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Lambda {
    /// `λ = max · sigmoid(raw)`, learnable.
    Learned { raw: f64, max: f64 },
    Fixed(f64),
}

impl Lambda {
    pub fn learned(init: f64, max: f64) -> Result<Self> {
        if !(init > 0.0 && init < max) {
            return Err(Error::param(format!("need 0 < init_lambda < max_lambda, got {init} and {max}")));
        }
        let p = init / max;
        Ok(Lambda::Learned { raw: (p / (1.0 - p)).ln(), max })
    }

    pub fn fixed(value: f64) -> Result<Self> {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::param(format!("lambda must be positive, got {value}")));
        }
        Ok(Lambda::Fixed(value))
    }

    pub fn value(&self) -> f64 {
        match *self {
            Lambda::Learned { raw, max } => max / (1.0 + (-raw).exp()),
            Lambda::Fixed(v) => v,
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, Lambda::Learned { .. })
    }

    pub fn var<'t>(&self, tape: &'t Tape, name: &str, trainable: bool) -> Var<'t> {
        match *self {
            Lambda::Learned { raw, max } => leaf(tape, name.to_string(), &Matrix::scalar(raw), trainable)
                .sigmoid()
                .scale(max),
            Lambda::Fixed(v) => tape.scalar(v),
        }
    }

    pub fn raw_mut(&mut self) -> Option<&mut f64> {
        match self {
            Lambda::Learned { raw, .. } => Some(raw),
            Lambda::Fixed(_) => None,
        }
    }
}

/// Prior over `vec U` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub enum InducingPrior {
    /// `N(0, I)`.
    Whitened,
    /// `N(0, K_r ⊗ K_c)` for row-major `vec U`, i.e. `MN(0, K_r, K_c)`.
    Dense { precision: Matrix, logdet: f64 },
}

impl InducingPrior {
    pub fn kronecker(k_r: &Matrix, k_c: &Matrix) -> Result<Self> {
        let cov = k_r.kron(k_c);
        let l = cholesky(&cov)?;
        Ok(InducingPrior::Dense {
            precision: inverse_spd(&cov)?,
            logdet: logdet_from_cholesky(&l),
        })
    }

    pub fn covariance(&self, dim: usize) -> Result<Matrix> {
        match self {
            InducingPrior::Whitened => Ok(Matrix::identity(dim)),
            InducingPrior::Dense { precision, .. } => inverse_spd(precision),
        }
    }

    pub fn logpdf(&self, u: &Matrix) -> f64 {
        let n = u.len() as f64;
        match self {
            InducingPrior::Whitened => -0.5 * u.as_slice().iter().map(|v| v * v).sum::<f64>() - 0.5 * n * LN_2PI,
            InducingPrior::Dense { precision, logdet } => {
                let x = Matrix::column(u.as_slice());
                let quad = x.t_matmul(&precision.matmul_unchecked(&x)).get(0, 0);
                -0.5 * (quad + logdet + n * LN_2PI)
            }
        }
    }

    /// Column-wise log-densities of a `d × S` batch on the tape, `1 × S`.
    pub fn logpdf_var<'t>(&self, tape: &'t Tape, u: Var<'t>) -> Result<Var<'t>> {
        let n = u.shape().0 as f64;
        let quad = match self {
            InducingPrior::Whitened => u.square().sum_rows(),
            InducingPrior::Dense { precision, .. } => {
                let pu = tape.constant(precision.clone()).matmul(&u)?;
                u.hadamard(&pu)?.sum_rows()
            }
        };
        let constant = match self {
            InducingPrior::Whitened => n * LN_2PI,
            InducingPrior::Dense { logdet, .. } => logdet + n * LN_2PI,
        };
        Ok(quad.offset(constant).scale(-0.5))
    }
}

/// `KL(N(m_q, diag s_q) ‖ N(m_p, K_p))` with `s_q` the variances.
pub fn gaussian_kl(m_q: &[f64], s_q_diag: &[f64], m_p: &[f64], k_p: &Matrix) -> Result<f64> {
    let d = m_q.len();
    if s_q_diag.len() != d || m_p.len() != d || k_p.shape() != (d, d) {
        return Err(Error::dim(
            "gaussian_kl",
            format!("m_q {d}, s_q {}, m_p {}, k_p {:?}", s_q_diag.len(), m_p.len(), k_p.shape()),
        ));
    }
    if s_q_diag.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::param("variational variances must be positive"));
    }
    let l = cholesky(k_p)?;
    let k_inv = cho_solve(&l, &Matrix::identity(d))?;
    let trace: f64 = (0..d).map(|i| k_inv.get(i, i) * s_q_diag[i]).sum();
    let diff = Matrix::column(&m_p.iter().zip(m_q).map(|(p, q)| p - q).collect::<Vec<_>>());
    let quad = diff.t_matmul(&cho_solve(&l, &diff)?).get(0, 0);
    let logdet_q: f64 = s_q_diag.iter().map(|s| s.ln()).sum();
    Ok(0.5 * (trace + quad - d as f64 + logdet_from_cholesky(&l) - logdet_q))
}

/// KL against the standard-normal prior, summed per coordinate.
pub fn whitened_kl(post: &InducingPosterior) -> Result<f64> {
    if !post.whitened {
        return Err(Error::param("whitened_kl requires a whitened posterior"));
    }
    let sigma = post.sigma();
    let kl = 0.5
        * post
            .m
            .as_slice()
            .iter()
            .zip(sigma.as_slice())
            .map(|(m, s)| s * s + m * m - 1.0 - 2.0 * s.ln())
            .sum::<f64>();
    if kl.is_finite() {
        Ok(kl)
    } else {
        Err(Error::numeric("whitened KL is not finite"))
    }
}

/// `(D/2)(λ² − 1 − 2 ln λ)`.
pub fn conditional_kl(lambda: f64, d_total: usize) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::param(format!("lambda must be positive, got {lambda}")));
    }
    Ok(0.5 * d_total as f64 * (lambda * lambda - 1.0 - 2.0 * lambda.ln()))
}

/// Tape form of [`conditional_kl`] with `lambda` a `1 × 1` node.
pub fn conditional_kl_var<'t>(lambda: Var<'t>, d_total: usize) -> Var<'t> {
    lambda
        .square()
        .sub(&lambda.ln().scale(2.0))
        .expect("scalar shapes")
        .offset(-1.0)
        .scale(0.5 * d_total as f64)
}

/// Closed-form `KL(q₀ ‖ p)` on the tape, valid for the identity flow.
pub fn closed_form_kl_var<'t>(tape: &'t Tape, m: Var<'t>, sigma: Var<'t>, prior: &InducingPrior) -> Result<Var<'t>> {
    let d = m.shape().0 * m.shape().1;
    let log_var = sigma.ln().scale(2.0).sum();
    match prior {
        InducingPrior::Whitened => Ok(sigma
            .square()
            .sum()
            .add(&m.square().sum())?
            .sub(&log_var)?
            .offset(-(d as f64))
            .scale(0.5)),
        InducingPrior::Dense { precision, logdet } => {
            let diag = Matrix::from_fn(m.shape().0, m.shape().1, |i, j| {
                let k = i * m.shape().1 + j;
                precision.get(k, k)
            });
            let trace = sigma.square().hadamard(&tape.constant(diag))?.sum();
            let mv = m.reshape(d, 1)?;
            let quad = mv.hadamard(&tape.constant(precision.clone()).matmul(&mv)?)?.sum();
            Ok(trace.add(&quad)?.sub(&log_var)?.offset(logdet - d as f64).scale(0.5))
        }
    }
}

/// `MN(0, K_r, K_c)` with both covariance factors recorded on the tape, so
/// the KL also differentiates through the factors.
pub struct KroneckerPriorVar<'t> {
    k_r: Var<'t>,
    k_c: Var<'t>,
    logdet: Var<'t>,
}

impl<'t> KroneckerPriorVar<'t> {
    pub fn new(k_r: Var<'t>, k_c: Var<'t>) -> Result<Self> {
        let (r, c) = (k_r.shape().0, k_c.shape().0);
        let logdet = k_r.logdet_spd()?.scale(c as f64).add(&k_c.logdet_spd()?.scale(r as f64))?;
        Ok(Self { k_r, k_c, logdet })
    }

    fn shape(&self) -> (usize, usize) {
        (self.k_r.shape().0, self.k_c.shape().0)
    }

    /// `tr(K_c⁻¹ Uᵀ K_r⁻¹ U)` for one inducing matrix.
    fn quad(&self, u: &Var<'t>) -> Result<Var<'t>> {
        let x = self.k_r.spd_solve(u)?;
        let y = self.k_c.spd_solve(&x.t())?;
        Ok(u.t().hadamard(&y)?.sum())
    }

    /// Mean log-density over the columns of a `d × S` batch of row-major
    /// inducing matrices.
    pub fn mean_logpdf_var(&self, u: &Var<'t>) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        let s = u.shape().1;
        let mut total = self.quad(&u.slice_cols(0, 1)?.reshape(r, c)?)?;
        for k in 1..s {
            total = total.add(&self.quad(&u.slice_cols(k, 1)?.reshape(r, c)?)?)?;
        }
        let n = (r * c) as f64;
        Ok(total.scale(1.0 / s as f64).add(&self.logdet)?.offset(n * LN_2PI).scale(-0.5))
    }

    /// Closed-form `KL(N(m, diag σ²) ‖ MN(0, K_r, K_c))`; `m` and `sigma`
    /// have the inducing shape.
    pub fn closed_form_kl_var(&self, m: &Var<'t>, sigma: &Var<'t>) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        let tape = m.tape();
        let inv_diag = |k: &Var<'t>, n: usize| -> Result<Var<'t>> {
            let eye = tape.constant(Matrix::identity(n));
            Ok(k.spd_solve(&eye)?.hadamard(&eye)?.sum_rows())
        };
        let a = inv_diag(&self.k_r, r)?;
        let b = inv_diag(&self.k_c, c)?;
        let trace = a.matmul(&sigma.square())?.matmul(&b.t())?;
        let log_var = sigma.ln().scale(2.0).sum();
        Ok(trace
            .add(&self.quad(m)?)?
            .sub(&log_var)?
            .add(&self.logdet)?
            .offset(-((r * c) as f64))
            .scale(0.5))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self { mean, std_error: (var / n as f64).sqrt(), n }
    }

    /// `|mean − target| ≤ k·SE`, with a tiny absolute floor for exact cases.
    pub fn agrees_with(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error + 1e-12 * target.abs().max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMethod {
    ClosedForm,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub kl_u: f64,
    pub kl_w: f64,
    pub method: KlMethod,
    pub n_samples: usize,
    pub std_error: f64,
}

const MC_CHUNK: usize = 4096;

/// Per-sample values `log q₀(U₀) − log|det J(U₀)| − log p(T(U₀))`.
pub fn mc_flow_kl_samples<R: Rng + ?Sized>(
    post: &InducingPosterior,
    flow: &FlowStack,
    prior_logdensity: &dyn Fn(&Matrix) -> f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::param("mc_flow_kl needs at least one sample"));
    }
    let d = post.dim();
    if flow.dim() != d {
        return Err(Error::dim("mc_flow_kl", format!("posterior dim {d}, flow dim {}", flow.dim())));
    }
    let (rows, cols) = post.shape();
    let mut out = Vec::with_capacity(n);
    let mut done = 0;
    while done < n {
        let chunk = MC_CHUNK.min(n - done);
        let mut u0 = Matrix::zeros(d, chunk);
        let mut log_q0 = Vec::with_capacity(chunk);
        for s in 0..chunk {
            let sample = post.sample_base(rng);
            log_q0.push(post.base_logpdf(&sample));
            for (k, v) in sample.as_slice().iter().enumerate() {
                u0.set(k, s, *v);
            }
        }
        let (u, logdet) = flow.forward_batch(&u0)?;
        for s in 0..chunk {
            let col = Matrix::new(rows, cols, u.col_vec(s))
                .map_err(|_| Error::numeric(format!("non-finite flow output at sample {}", done + s)))?;
            let v = log_q0[s] - logdet[s] - prior_logdensity(&col);
            if !v.is_finite() {
                return Err(Error::numeric(format!("non-finite KL integrand at sample {}", done + s)));
            }
            out.push(v);
        }
        done += chunk;
    }
    Ok(out)
}

/// Monte-Carlo `KL(q_φ ‖ p)` with its standard error.
pub fn mc_flow_kl<R: Rng + ?Sized>(
    post: &InducingPosterior,
    flow: &FlowStack,
    prior_logdensity: &dyn Fn(&Matrix) -> f64,
    n: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    Ok(McEstimate::from_samples(&mc_flow_kl_samples(post, flow, prior_logdensity, n, rng)?))
}

/// KL report for one posterior/flow pair and a given λ and weight count.
pub fn kl_report<R: Rng + ?Sized>(
    post: &InducingPosterior,
    flow: &FlowStack,
    prior: &InducingPrior,
    lambda: f64,
    d_total: usize,
    n_mc: usize,
    rng: &mut R,
) -> Result<KlReport> {
    let kl_w = conditional_kl(lambda, d_total)?;
    if flow.is_identity() {
        let sigma = post.sigma();
        let var: Vec<f64> = sigma.as_slice().iter().map(|s| s * s).collect();
        let kl_u = match prior {
            InducingPrior::Whitened => whitened_kl(post)?,
            InducingPrior::Dense { .. } => {
                gaussian_kl(post.m.as_slice(), &var, &vec![0.0; post.dim()], &prior.covariance(post.dim())?)?
            }
        };
        return Ok(KlReport { kl_u, kl_w, method: KlMethod::ClosedForm, n_samples: 0, std_error: 0.0 });
    }
    let est = mc_flow_kl(post, flow, &|u| prior.logpdf(u), n_mc, rng)?;
    Ok(KlReport {
        kl_u: est.mean,
        kl_w,
        method: KlMethod::MonteCarlo,
        n_samples: n_mc,
        std_error: est.std_error,
    })
}
