//! Constrained multi-objective Bayesian optimization of the adapter learning
//! rate and weight decay.
//!
//! Every objective and constraint gets an independent GP surrogate with a
//! squared-exponential kernel. Candidates are scored by a Monte-Carlo noisy
//! expected hypervolume improvement weighted by the probability of
//! feasibility. Objectives are reported in minimization orientation and
//! negated internally, so hypervolumes and reference points live in the
//! maximization orientation.

use std::fmt::Write as _;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::linalg::{cho_solve, cholesky_semidefinite, cholesky_with_jitter, inverse_spd, logdet_from_cholesky, solve_lower, Matrix};
use crate::rng::{derive_seed, stream};

/// Squared-exponential kernel with one lengthscale per input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeKernel {
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
}

impl SeKernel {
    pub fn new(lengthscales: Vec<f64>, signal_var: f64) -> Result<Self> {
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::param("lengthscales must be positive and finite"));
        }
        if !(signal_var > 0.0 && signal_var.is_finite()) {
            return Err(Error::param("signal variance must be positive and finite"));
        }
        Ok(Self { lengthscales, signal_var })
    }

    /// Unit lengthscales and unit signal variance.
    pub fn unit(dim: usize) -> Self {
        Self { lengthscales: vec![1.0; dim], signal_var: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| ((x - y) / l).powi(2))
            .sum();
        self.signal_var * (-0.5 * r2).exp()
    }

    pub fn matrix(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> Matrix {
        Matrix::from_fn(a.len(), b.len(), |i, j| self.eval(&a[i], &b[j]))
    }
}

/// Settings of the type-II maximum-likelihood fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpFitConfig {
    pub restarts: usize,
    pub iterations: usize,
    pub step_size: f64,
    /// Smallest noise variance, relative to the target variance.
    pub min_noise: f64,
}

impl Default for GpFitConfig {
    fn default() -> Self {
        Self { restarts: 4, iterations: 150, step_size: 0.05, min_noise: 1e-6 }
    }
}

/// Exact GP regression with a constant prior mean.
#[derive(Debug, Clone)]
pub struct GpSurrogate {
    kernel: SeKernel,
    noise_var: f64,
    prior_mean: f64,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    chol: Matrix,
    alpha: Matrix,
}

impl GpSurrogate {
    pub fn new(kernel: SeKernel, noise_var: f64, prior_mean: f64, x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::param(format!("need matching nonempty inputs and targets, got {} and {}", x.len(), y.len())));
        }
        if x.iter().any(|p| p.len() != kernel.dim()) {
            return Err(Error::dim("gp inputs", format!("kernel has {} dimensions", kernel.dim())));
        }
        if !(noise_var >= 0.0) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("noise variance must be nonnegative and targets finite"));
        }
        let mut k = kernel.matrix(&x, &x);
        for i in 0..x.len() {
            k.set(i, i, k.get(i, i) + noise_var);
        }
        let chol = cholesky_with_jitter(&k, 1e-10 * kernel.signal_var)?;
        let resid = Matrix::column(&y.iter().map(|v| v - prior_mean).collect::<Vec<_>>());
        let alpha = cho_solve(&chol, &resid)?;
        Ok(Self { kernel, noise_var, prior_mean, x, y, chol, alpha })
    }

    /// Fits kernel hyperparameters and noise by multi-start gradient ascent
    /// on the log marginal likelihood. The prior mean is the target mean.
    pub fn fit<R: Rng + ?Sized>(x: Vec<Vec<f64>>, y: Vec<f64>, cfg: &GpFitConfig, rng: &mut R) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::param("need matching nonempty inputs and targets"));
        }
        let dim = x[0].len();
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(1e-12);
        let spans: Vec<f64> = (0..dim)
            .map(|d| {
                let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[d]), hi.max(p[d])));
                if hi > lo { hi - lo } else { 1.0 }
            })
            .collect();
        let mut lower: Vec<f64> = spans.iter().map(|s| (0.02 * s).ln()).collect();
        let mut upper: Vec<f64> = spans.iter().map(|s| (20.0 * s).ln()).collect();
        lower.extend([(1e-3 * var).ln(), (cfg.min_noise * var).ln()]);
        upper.extend([(1e2 * var).ln(), var.ln()]);

        let mut best: Option<(f64, Self)> = None;
        for start in 0..cfg.restarts.max(1) {
            let theta0: Vec<f64> = if start == 0 {
                let mut t: Vec<f64> = spans.iter().map(|s| (0.3 * s).ln()).collect();
                t.extend([var.ln(), (1e-2 * var).ln().max(lower[dim + 1])]);
                t
            } else {
                lower.iter().zip(&upper).map(|(lo, hi)| rng.random_range(*lo..*hi)).collect()
            };
            match ascend(&x, &y, mean, theta0, &lower, &upper, cfg) {
                Ok(gp) => {
                    let lml = gp.log_marginal_likelihood();
                    if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                        best = Some((lml, gp));
                    }
                }
                Err(e) => warn!("gp restart {start} failed: {e}"),
            }
        }
        best.map(|(_, gp)| gp).ok_or_else(|| Error::numeric("every GP fit restart failed"))
    }

    pub fn kernel(&self) -> &SeKernel {
        &self.kernel
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.y.len() as f64;
        let fit: f64 = self.y.iter().zip(self.alpha.as_slice()).map(|(y, a)| (y - self.prior_mean) * a).sum();
        -0.5 * fit - 0.5 * logdet_from_cholesky(&self.chol) - 0.5 * n * std::f64::consts::TAU.ln()
    }

    /// Posterior cross-covariance of the latent function between `a` and `b`.
    pub fn posterior_cov(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Matrix> {
        let va = solve_lower(&self.chol, &self.kernel.matrix(&self.x, a))?;
        let vb = solve_lower(&self.chol, &self.kernel.matrix(&self.x, b))?;
        self.kernel.matrix(a, b).sub(&va.t_matmul(&vb))
    }

    pub fn posterior_mean(&self, queries: &[Vec<f64>]) -> Vec<f64> {
        let ks = self.kernel.matrix(queries, &self.x);
        ks.matmul_unchecked(&self.alpha).as_slice().iter().map(|v| v + self.prior_mean).collect()
    }

    /// Joint posterior mean and covariance of the latent function at
    /// `queries`. Diagonal entries are floored at zero.
    pub fn posterior(&self, queries: &[Vec<f64>]) -> Result<(Vec<f64>, Matrix)> {
        let mean = self.posterior_mean(queries);
        let mut cov = self.posterior_cov(queries, queries)?;
        for i in 0..queries.len() {
            cov.set(i, i, cov.get(i, i).max(0.0));
        }
        Ok((mean, cov))
    }

    /// Marginal posterior mean and variance at one point.
    pub fn mean_var(&self, query: &[f64]) -> Result<(f64, f64)> {
        let q = [query.to_vec()];
        let (m, c) = self.posterior(&q)?;
        Ok((m[0], c.get(0, 0)))
    }

    /// Reparameterized joint draws `μ + L z` at `queries`; `z` holds one
    /// column of standard normals per draw.
    pub fn sample_joint(&self, queries: &[Vec<f64>], z: &Matrix) -> Result<Matrix> {
        if z.rows() != queries.len() {
            return Err(Error::dim("sample_joint", format!("{} queries, noise has {} rows", queries.len(), z.rows())));
        }
        let (mean, cov) = self.posterior(queries)?;
        let l = cholesky_semidefinite(&cov, 1e-12)?;
        let mut draws = l.matmul(z)?;
        for i in 0..queries.len() {
            for t in 0..z.cols() {
                draws.set(i, t, draws.get(i, t) + mean[i]);
            }
        }
        Ok(draws)
    }
}

/// Log marginal likelihood and its gradient in the log-parameters
/// `(log ℓ_1..ℓ_d, log s², log σ²)`.
fn lml_and_grad(x: &[Vec<f64>], y: &[f64], mean: f64, theta: &[f64]) -> Result<(f64, Vec<f64>, GpSurrogate)> {
    let dim = x[0].len();
    let kernel = SeKernel::new(theta[..dim].iter().map(|v| v.exp()).collect(), theta[dim].exp())?;
    let noise = theta[dim + 1].exp();
    let gp = GpSurrogate::new(kernel, noise, mean, x.to_vec(), y.to_vec())?;
    let n = x.len();
    let mut k = gp.kernel.matrix(x, x);
    let kse = k.clone();
    for i in 0..n {
        k.set(i, i, k.get(i, i) + noise);
    }
    let kinv = inverse_spd(&k).or_else(|_| cho_solve(&gp.chol, &Matrix::identity(n)))?;
    let a = gp.alpha.as_slice();
    // W = ααᵀ − K⁻¹; ∂LML/∂θ = ½ tr(W ∂K/∂θ)
    let w = |i: usize, j: usize| a[i] * a[j] - kinv.get(i, j);
    let mut grad = vec![0.0; dim + 2];
    for i in 0..n {
        for j in 0..n {
            let wij = w(i, j);
            let kij = kse.get(i, j);
            for (d, g) in grad.iter_mut().enumerate().take(dim) {
                let l = gp.kernel.lengthscales[d];
                *g += 0.5 * wij * kij * ((x[i][d] - x[j][d]) / l).powi(2);
            }
            grad[dim] += 0.5 * wij * kij;
        }
        grad[dim + 1] += 0.5 * w(i, i) * noise;
    }
    Ok((gp.log_marginal_likelihood(), grad, gp))
}

fn ascend(
    x: &[Vec<f64>],
    y: &[f64],
    mean: f64,
    mut theta: Vec<f64>,
    lower: &[f64],
    upper: &[f64],
    cfg: &GpFitConfig,
) -> Result<GpSurrogate> {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut best: Option<(f64, GpSurrogate)> = None;
    for it in 1..=cfg.iterations.max(1) {
        let (lml, grad, gp) = lml_and_grad(x, y, mean, &theta)?;
        if best.as_ref().is_none_or(|(b, _)| lml > *b) {
            best = Some((lml, gp));
        }
        let (c1, c2) = (1.0 - b1_pow(b1, it), 1.0 - b1_pow(b2, it));
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            theta[i] += cfg.step_size * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            theta[i] = theta[i].clamp(lower[i], upper[i]);
        }
    }
    let (lml, _, gp) = lml_and_grad(x, y, mean, &theta)?;
    match best {
        Some((b, g)) if b > lml => Ok(g),
        _ => Ok(gp),
    }
}

fn b1_pow(b: f64, t: usize) -> f64 {
    b.powi(t.min(i32::MAX as usize) as i32)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `Π_q Π_j Φ(−μ_j(x_q)/σ_j(x_q))` for constraints of the form `c ≤ 0`.
/// A zero-variance constraint contributes 1, 0 or ½ according to the sign
/// of its mean.
pub fn prob_feasible(constraints: &[GpSurrogate], queries: &[Vec<f64>]) -> Result<f64> {
    let mut p = 1.0;
    for c in constraints {
        let (mean, cov) = c.posterior(queries)?;
        for (q, mu) in mean.iter().enumerate() {
            p *= pof_term(*mu, cov.get(q, q));
        }
    }
    Ok(p)
}

pub fn pof_term(mu: f64, var: f64) -> f64 {
    if var > 0.0 {
        normal_cdf(-mu / var.sqrt())
    } else if mu < 0.0 {
        1.0
    } else if mu > 0.0 {
        0.0
    } else {
        0.5
    }
}

/// `a` dominates `b` under minimization.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

/// Indices of the points no other point dominates (minimization).
/// Duplicates are all kept.
pub fn pareto_filter(points: &[Vec<f64>]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| !points.iter().any(|p| dominates(p, &points[i])))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hypervolume {
    pub volume: f64,
    /// Points that did not strictly dominate the reference and were dropped.
    pub clipped: usize,
}

/// Dominated hypervolume of `points` (maximization) relative to
/// `reference`, computed exactly by recursive slicing.
pub fn hypervolume(points: &[Vec<f64>], reference: &[f64]) -> Result<Hypervolume> {
    let d = reference.len();
    if d == 0 {
        return Err(Error::param("reference point is empty"));
    }
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(Error::dim("hypervolume", format!("point of length {} vs reference {d}", p.len())));
    }
    let mut kept = Vec::with_capacity(points.len());
    let mut clipped = 0;
    for p in points {
        if p.iter().zip(reference).all(|(x, r)| x > r) {
            kept.push(p.iter().zip(reference).map(|(x, r)| x - r).collect::<Vec<f64>>());
        } else {
            clipped += 1;
        }
    }
    Ok(Hypervolume { volume: hv_positive(kept), clipped })
}

fn hv_positive(points: Vec<Vec<f64>>) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let d = points[0].len();
    if d == 1 {
        return points.iter().map(|p| p[0]).fold(0.0, f64::max);
    }
    // keep only the maximization front
    let neg: Vec<Vec<f64>> = points.iter().map(|p| p.iter().map(|v| -v).collect()).collect();
    let mut front: Vec<Vec<f64>> = pareto_filter(&neg).into_iter().map(|i| points[i].clone()).collect();
    front.sort_by(|a, b| b[d - 1].total_cmp(&a[d - 1]));
    front.dedup();
    if d == 2 {
        // sorted by second coordinate descending; first coordinate ascends
        let mut area = 0.0;
        let mut x_done = 0.0;
        for p in &front {
            if p[0] > x_done {
                area += (p[0] - x_done) * p[1];
                x_done = p[0];
            }
        }
        return area;
    }
    let mut volume = 0.0;
    for i in 0..front.len() {
        let next = front.get(i + 1).map_or(0.0, |p| p[d - 1]);
        let height = front[i][d - 1] - next;
        if height > 0.0 {
            let slice: Vec<Vec<f64>> = front[..=i].iter().map(|p| p[..d - 1].to_vec()).collect();
            volume += height * hv_positive(slice);
        }
    }
    volume
}

/// Componentwise minimum of the feasible values (maximization) minus
/// `margin`.
pub fn reference_point(feasible: &[Vec<f64>], margin: f64) -> Result<Vec<f64>> {
    let first = feasible
        .first()
        .ok_or_else(|| Error::param("no feasible observation yet; run the space-filling phase first"))?;
    let mut r = first.clone();
    for p in feasible {
        if p.len() != r.len() {
            return Err(Error::dim("reference_point", "ragged objective vectors"));
        }
        for (ri, v) in r.iter_mut().zip(p) {
            *ri = ri.min(*v);
        }
    }
    Ok(r.into_iter().map(|v| v - margin).collect())
}

/// Monte-Carlo NEHVI with fixed base samples, so that repeated evaluations
/// over a candidate set share random numbers.
///
/// For draw `t` the objectives at the historical points and at the batch
/// come from one joint posterior sample; the historical part is filtered to
/// its non-dominated subset before the improvement is measured.
#[derive(Debug, Clone)]
pub struct QnehviEstimator<'a> {
    objectives: &'a [GpSurrogate],
    constraints: &'a [GpSurrogate],
    history: Vec<Vec<f64>>,
    reference: Vec<f64>,
    z_hist: Vec<Matrix>,
    z_batch: Vec<Matrix>,
}

impl<'a> QnehviEstimator<'a> {
    /// `objectives` model maximization-oriented values; `history` holds the
    /// inputs of the feasible archive points.
    pub fn new<R: Rng + ?Sized>(
        objectives: &'a [GpSurrogate],
        constraints: &'a [GpSurrogate],
        history: &[Vec<f64>],
        reference: &[f64],
        batch_size: usize,
        t_samples: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if objectives.len() != reference.len() {
            return Err(Error::dim("qnehvi", format!("{} objectives, reference of length {}", objectives.len(), reference.len())));
        }
        if t_samples == 0 || batch_size == 0 {
            return Err(Error::param("need at least one sample and one candidate"));
        }
        let mut z = |rows: usize| Matrix::from_fn(rows, t_samples, |_, _| StandardNormal.sample(rng));
        let z_hist = objectives.iter().map(|_| z(history.len())).collect();
        let z_batch = objectives.iter().map(|_| z(batch_size)).collect();
        Ok(Self {
            objectives,
            constraints,
            history: history.to_vec(),
            reference: reference.to_vec(),
            z_hist,
            z_batch,
        })
    }

    pub fn samples(&self) -> usize {
        self.z_batch[0].cols()
    }

    /// Expected hypervolume improvement of `batch` times its probability of
    /// feasibility.
    pub fn value(&self, batch: &[Vec<f64>]) -> Result<f64> {
        if batch.len() != self.z_batch[0].rows() {
            return Err(Error::dim("qnehvi", format!("estimator built for {} candidates, got {}", self.z_batch[0].rows(), batch.len())));
        }
        let pof = prob_feasible(self.constraints, batch)?;
        if pof == 0.0 {
            return Ok(0.0);
        }
        let nh = self.history.len();
        let points: Vec<Vec<f64>> = self.history.iter().chain(batch).cloned().collect();
        let t_samples = self.samples();
        let mut draws = Vec::with_capacity(self.objectives.len());
        for (m, gp) in self.objectives.iter().enumerate() {
            let mut z = Matrix::zeros(points.len(), t_samples);
            for t in 0..t_samples {
                for i in 0..nh {
                    z.set(i, t, self.z_hist[m].get(i, t));
                }
                for q in 0..batch.len() {
                    z.set(nh + q, t, self.z_batch[m].get(q, t));
                }
            }
            draws.push(gp.sample_joint(&points, &z)?);
        }
        let vector = |i: usize, t: usize| -> Vec<f64> { draws.iter().map(|d| d.get(i, t)).collect() };
        let mut total = 0.0;
        for t in 0..t_samples {
            let hist: Vec<Vec<f64>> = (0..nh).map(|i| vector(i, t)).collect();
            let neg: Vec<Vec<f64>> = hist.iter().map(|p| p.iter().map(|v| -v).collect()).collect();
            let front: Vec<Vec<f64>> = pareto_filter(&neg).into_iter().map(|i| hist[i].clone()).collect();
            let base = hypervolume(&front, &self.reference)?.volume;
            let mut with_batch = front;
            with_batch.extend((nh..points.len()).map(|i| vector(i, t)));
            let improved = hypervolume(&with_batch, &self.reference)?.volume;
            total += (improved - base).max(0.0);
        }
        Ok(pof * total / t_samples as f64)
    }
}

/// One-shot MC estimate of the PoF-weighted NEHVI of `batch`.
pub fn qnehvi_acquire<R: Rng + ?Sized>(
    objectives: &[GpSurrogate],
    constraints: &[GpSurrogate],
    history: &[Vec<f64>],
    reference: &[f64],
    batch: &[Vec<f64>],
    t_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    QnehviEstimator::new(objectives, constraints, history, reference, batch.len(), t_samples, rng)?.value(batch)
}

/// Axis-aligned box in the optimizer's coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SearchSpace {
    pub fn new(names: Vec<String>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if names.len() != lower.len() || lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::param("search space needs one name and bound pair per dimension"));
        }
        if lower.iter().zip(&upper).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::param("every lower bound must be below its upper bound"));
        }
        Ok(Self { names, lower, upper })
    }

    /// `log10(lr) ∈ [−5, log10 2e-3]`, `log10(wd) ∈ [−2, log10 0.5]`.
    pub fn learning_rate_weight_decay() -> Self {
        Self {
            names: vec!["log10_lr".into(), "log10_wd".into()],
            lower: vec![1e-5_f64.log10(), 1e-2_f64.log10()],
            upper: vec![2e-3_f64.log10(), 5e-1_f64.log10()],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| lo + v.clamp(0.0, 1.0) * (hi - lo))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// `n` scrambled Sobol points starting at index `skip`.
    pub fn sobol(&self, n: usize, skip: usize, seed: u64) -> Vec<Vec<f64>> {
        let scramble = (seed ^ (seed >> 32)) as u32;
        (skip..skip + n)
            .map(|i| {
                let u: Vec<f64> = (0..self.dim())
                    .map(|d| f64::from(sobol_burley::sample(i as u32, d as u32, scramble)))
                    .collect();
                self.from_unit(&u)
            })
            .collect()
    }

    pub fn uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: Vec<f64> = (0..self.dim()).map(|_| rng.random::<f64>()).collect();
        self.from_unit(&u)
    }
}

/// `(lr, wd)` from log10 coordinates.
pub fn hyperparameters(x: &[f64]) -> (f64, f64) {
    (10f64.powf(x[0]), 10f64.powf(x[1]))
}

/// Measured objectives (minimized) and constraints (`c ≤ 0` is feasible).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub objectives: Vec<f64>,
    pub constraints: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub round: usize,
    pub x: Vec<f64>,
    pub objectives: Vec<f64>,
    pub constraints: Vec<f64>,
    pub feasible: bool,
}

/// Every evaluated configuration plus queries on its feasible front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoArchive {
    pub input_names: Vec<String>,
    pub objective_names: Vec<String>,
    entries: Vec<ArchiveEntry>,
}

impl ParetoArchive {
    pub fn new(input_names: Vec<String>, objective_names: Vec<String>) -> Self {
        Self { input_names, objective_names, entries: Vec::new() }
    }

    pub fn push(&mut self, round: usize, x: Vec<f64>, obs: Observation) -> Result<()> {
        if x.len() != self.input_names.len() || obs.objectives.len() != self.objective_names.len() {
            return Err(Error::dim("archive", "input or objective count differs from the archive header"));
        }
        if let Some(first) = self.entries.first() {
            if first.constraints.len() != obs.constraints.len() {
                return Err(Error::dim("archive", "constraint count changed"));
            }
        }
        if obs.objectives.iter().chain(&obs.constraints).any(|v| !v.is_finite()) {
            return Err(Error::numeric("observation contains a non-finite value"));
        }
        let feasible = obs.constraints.iter().all(|c| *c <= 0.0);
        self.entries.push(ArchiveEntry { round, x, objectives: obs.objectives, constraints: obs.constraints, feasible });
        Ok(())
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn feasible(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].feasible).collect()
    }

    /// Feasible, non-dominated entries.
    pub fn front(&self) -> Vec<usize> {
        let feas = self.feasible();
        let objs: Vec<Vec<f64>> = feas.iter().map(|&i| self.entries[i].objectives.clone()).collect();
        pareto_filter(&objs).into_iter().map(|k| feas[k]).collect()
    }

    /// Hypervolume of the feasible entries relative to a reference given
    /// in minimization orientation.
    pub fn hypervolume(&self, reference_min: &[f64]) -> Result<f64> {
        let pts: Vec<Vec<f64>> = self.feasible().iter().map(|&i| negate(&self.entries[i].objectives)).collect();
        Ok(hypervolume(&pts, &negate(reference_min))?.volume)
    }

    /// The feasible entry closest to the empirical front in range-normalized
    /// objective space, ties broken by the smaller value of objective
    /// `tie_objective`.
    pub fn operating_point(&self, tie_objective: usize) -> Option<usize> {
        let feas = self.feasible();
        let front = self.front();
        if feas.is_empty() {
            return None;
        }
        let k = self.objective_names.len();
        let (lo, hi): (Vec<f64>, Vec<f64>) = (0..k)
            .map(|m| {
                feas.iter()
                    .map(|&i| self.entries[i].objectives[m])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
            })
            .unzip();
        let norm = |v: &[f64]| -> Vec<f64> {
            (0..k).map(|m| if hi[m] > lo[m] { (v[m] - lo[m]) / (hi[m] - lo[m]) } else { 0.0 }).collect()
        };
        let dist = |i: usize| -> f64 {
            let a = norm(&self.entries[i].objectives);
            front
                .iter()
                .map(|&j| norm(&self.entries[j].objectives).iter().zip(&a).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        };
        feas.into_iter().min_by(|&a, &b| {
            dist(a)
                .total_cmp(&dist(b))
                .then(self.entries[a].objectives[tie_objective].total_cmp(&self.entries[b].objectives[tie_objective]))
        })
    }

    /// One row per evaluation: round, inputs, objectives, constraints,
    /// feasibility.
    pub fn to_csv(&self) -> String {
        let n_c = self.entries.first().map_or(0, |e| e.constraints.len());
        let mut header: Vec<String> = vec!["round".into()];
        header.extend(self.input_names.iter().cloned());
        header.extend(self.objective_names.iter().cloned());
        header.extend((0..n_c).map(|j| format!("c{j}")));
        header.push("feasible".into());
        let mut out = header.join(",") + "\n";
        for e in &self.entries {
            let mut row = vec![e.round.to_string()];
            row.extend(e.x.iter().chain(&e.objectives).chain(&e.constraints).map(|v| format!("{v}")));
            row.push(e.feasible.to_string());
            out += &(row.join(",") + "\n");
        }
        out
    }
}

fn negate(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| -x).collect()
}

/// Names of the three adapter-tuning objectives, in order.
pub const ADAPTER_OBJECTIVES: [&str; 3] = ["ece", "nll", "neg_acc"];

/// Front of an adapter-tuning archive as `candidate,acc,nll,ece,lr,wd`.
pub fn pareto_table_csv(archive: &ParetoArchive) -> Result<String> {
    if archive.objective_names != ADAPTER_OBJECTIVES || archive.input_names.len() != 2 {
        return Err(Error::param("pareto table needs (ece, nll, neg_acc) objectives over (log10 lr, log10 wd)"));
    }
    let mut front = archive.front();
    front.sort_by(|&a, &b| archive.entries[a].objectives[1].total_cmp(&archive.entries[b].objectives[1]));
    let mut out = String::from("candidate,acc,nll,ece,lr,wd\n");
    for (k, &i) in front.iter().enumerate() {
        let e = &archive.entries[i];
        let (lr, wd) = hyperparameters(&e.x);
        let _ = writeln!(out, "{},{},{},{},{:e},{:e}", k + 1, -e.objectives[2], e.objectives[1], e.objectives[0], lr, wd);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CboConfig {
    pub initial_points: usize,
    pub rounds: usize,
    pub candidates: usize,
    pub mc_samples: usize,
    /// Subtracted from the feasible minimum to form the reference point.
    pub reference_margin: f64,
    pub gp: GpFitConfig,
    pub seed: u64,
}

impl Default for CboConfig {
    fn default() -> Self {
        Self {
            initial_points: 5,
            rounds: 20,
            candidates: 512,
            mc_samples: 32,
            reference_margin: 0.05,
            gp: GpFitConfig::default(),
            seed: 0,
        }
    }
}

/// Next configuration to evaluate: the qNEHVI maximizer over a Sobol
/// candidate set, or the next space-filling point while no observation is
/// feasible.
pub fn propose(archive: &ParetoArchive, space: &SearchSpace, cfg: &CboConfig, round: usize) -> Result<Vec<f64>> {
    let feasible = archive.feasible();
    if feasible.is_empty() || archive.len() < 2 {
        return Ok(space.sobol(1, archive.len(), cfg.seed).remove(0));
    }
    let mut rng = stream(cfg.seed, &format!("cbo/round-{round}"));
    let x: Vec<Vec<f64>> = archive.entries.iter().map(|e| e.x.clone()).collect();
    let mut objectives = Vec::new();
    for m in 0..archive.objective_names.len() {
        let y: Vec<f64> = archive.entries.iter().map(|e| -e.objectives[m]).collect();
        objectives.push(GpSurrogate::fit(x.clone(), y, &cfg.gp, &mut rng)?);
    }
    let mut constraints = Vec::new();
    for j in 0..archive.entries[0].constraints.len() {
        let y: Vec<f64> = archive.entries.iter().map(|e| e.constraints[j]).collect();
        constraints.push(GpSurrogate::fit(x.clone(), y, &cfg.gp, &mut rng)?);
    }
    let feasible_values: Vec<Vec<f64>> = feasible.iter().map(|&i| negate(&archive.entries[i].objectives)).collect();
    let reference = reference_point(&feasible_values, cfg.reference_margin)?;
    let history: Vec<Vec<f64>> = feasible.iter().map(|&i| archive.entries[i].x.clone()).collect();
    let estimator = QnehviEstimator::new(&objectives, &constraints, &history, &reference, 1, cfg.mc_samples.max(1), &mut rng)?;
    let candidates = space.sobol(cfg.candidates.max(1), 0, derive_seed(cfg.seed, &format!("cbo/candidates-{round}")));
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|c| estimator.value(std::slice::from_ref(c)).unwrap_or(0.0))
        .collect();
    let best = (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
    Ok(candidates[best].clone())
}

/// Space-filling initialization followed by `cfg.rounds` sequential BO
/// rounds. Failed evaluations are logged and skipped.
pub fn run_cbo<F>(space: &SearchSpace, objective_names: &[&str], cfg: &CboConfig, mut evaluate: F) -> Result<ParetoArchive>
where
    F: FnMut(&[f64]) -> Result<Observation>,
{
    let mut archive = ParetoArchive::new(space.names.clone(), objective_names.iter().map(|s| s.to_string()).collect());
    for x in space.sobol(cfg.initial_points, 0, cfg.seed) {
        record(&mut archive, 0, x, &mut evaluate)?;
    }
    for round in 1..=cfg.rounds {
        let x = propose(&archive, space, cfg, round)?;
        record(&mut archive, round, x, &mut evaluate)?;
    }
    Ok(archive)
}

/// Budget-matched baseline: `n` independent uniform draws.
pub fn random_search<F>(space: &SearchSpace, objective_names: &[&str], n: usize, seed: u64, mut evaluate: F) -> Result<ParetoArchive>
where
    F: FnMut(&[f64]) -> Result<Observation>,
{
    let mut archive = ParetoArchive::new(space.names.clone(), objective_names.iter().map(|s| s.to_string()).collect());
    let mut rng = stream(seed, "random-search");
    for round in 0..n {
        let x = space.uniform(&mut rng);
        record(&mut archive, round, x, &mut evaluate)?;
    }
    Ok(archive)
}

fn record<F>(archive: &mut ParetoArchive, round: usize, x: Vec<f64>, evaluate: &mut F) -> Result<()>
where
    F: FnMut(&[f64]) -> Result<Observation>,
{
    match evaluate(&x) {
        Ok(obs) => archive.push(round, x, obs),
        Err(e) => {
            warn!("evaluation at {x:?} failed: {e}");
            Ok(())
        }
    }
}
