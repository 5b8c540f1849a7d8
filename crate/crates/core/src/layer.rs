//! Stochastic low-rank adapter layer.
//!
//! One inducing matrix `U` per layer feeds both factors:
//! `Ā = T_r^A U T_c^A` (`r × d_in`) and `B̄ = T_r^B U T_c^B` (`d_out × r`).
//! Sampled factors add isotropic conditional noise scaled by λ, and the
//! layer output is `W_pre x + (α/r)·B(A x)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowStack;
use crate::kron::{CovarianceFactor, ProjectorPair, Side};
use crate::linalg::Matrix;
use crate::params::{join, leaf, Parameterized};
use crate::posterior::{closed_form_kl_var, InducingPosterior, InducingPrior, KroneckerPriorVar, Lambda};
use crate::rng::standard_normal_matrix;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerConfig {
    pub lora_rank: usize,
    pub alpha: f64,
    pub inducing_rows: usize,
    pub inducing_cols: usize,
    pub flow_depth: usize,
    pub whitened: bool,
    pub max_sd_u: f64,
    /// Starting posterior scale of `U`, capped at `max_sd_u`.
    pub init_sd_u: f64,
    pub prior_sd: f64,
    pub sqrt_width_scaling: bool,
    pub mean_init_std: f64,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            lora_rank: 8,
            alpha: 16.0,
            inducing_rows: 9,
            inducing_cols: 9,
            flow_depth: 1,
            whitened: true,
            max_sd_u: 0.1,
            init_sd_u: 0.001,
            prior_sd: 0.1,
            sqrt_width_scaling: true,
            mean_init_std: 0.3,
        }
    }
}

impl LayerConfig {
    /// Near point-mass posterior without a flow.
    pub fn degenerate() -> Self {
        Self {
            max_sd_u: 1e-3,
            flow_depth: 0,
            ..Self::default()
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.lora_rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.lora_rank == 0 || self.inducing_rows == 0 || self.inducing_cols == 0 {
            return Err(Error::param("ranks and inducing dimensions must be at least 1"));
        }
        if !(self.max_sd_u > 0.0) || !(self.init_sd_u > 0.0) || !(self.prior_sd > 0.0) || !self.alpha.is_finite() {
            return Err(Error::param("max_sd_u, init_sd_u and prior_sd must be positive, alpha finite"));
        }
        Ok(())
    }
}

/// Standard-normal draws consumed by one batch of `S` adapter samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNoise {
    /// `d × S`, one column per sample.
    pub eps_u: Matrix,
    pub eps_a: Vec<Matrix>,
    pub eps_b: Vec<Matrix>,
}

impl LayerNoise {
    pub fn samples(&self) -> usize {
        self.eps_a.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSample {
    pub a: Matrix,
    pub b: Matrix,
    pub delta_w: Matrix,
    pub u_raw: Matrix,
}

/// Per-step view of an adapter on the tape: the frozen weight and one
/// `(A, B)` pair per Monte-Carlo sample.
#[derive(Clone)]
pub struct DrawnAdapter<'t> {
    w_pre: Var<'t>,
    scale: f64,
    a: Vec<Var<'t>>,
    b: Vec<Var<'t>>,
}

impl<'t> DrawnAdapter<'t> {
    pub fn frozen(w_pre: Var<'t>) -> Self {
        Self { w_pre, scale: 0.0, a: Vec::new(), b: Vec::new() }
    }

    /// `W_pre x + (α/r)·B_s(A_s x)`; a single shared pair serves every `s`.
    pub fn apply(&self, sample: usize, x: Var<'t>) -> Result<Var<'t>> {
        let base = self.w_pre.matmul(&x)?;
        if self.a.is_empty() {
            return Ok(base);
        }
        let k = if self.a.len() == 1 { 0 } else { sample };
        let (a, b) = self
            .a
            .get(k)
            .zip(self.b.get(k))
            .ok_or_else(|| Error::param(format!("sample {sample} not drawn")))?;
        base.add(&b.matmul(&a.matmul(&x)?)?.scale(self.scale))
    }

    pub fn samples(&self) -> usize {
        self.a.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesLoraLayer {
    w_pre: Matrix,
    cfg: LayerConfig,
    a_row: CovarianceFactor,
    a_col: CovarianceFactor,
    b_row: CovarianceFactor,
    b_col: CovarianceFactor,
    posterior: InducingPosterior,
    flow: FlowStack,
    sigma_half_a: f64,
    sigma_half_b: f64,
}

impl BayesLoraLayer {
    pub fn new<R: Rng + ?Sized>(w_pre: Matrix, cfg: &LayerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d_out, d_in) = w_pre.shape();
        let (ri, ci, r) = (cfg.inducing_rows, cfg.inducing_cols, cfg.lora_rank);
        let a_row = CovarianceFactor::init(ri, r, rng);
        let a_col = CovarianceFactor::init(ci, d_in, rng);
        let b_row = CovarianceFactor::init(ri, d_out, rng);
        let b_col = CovarianceFactor::init(ci, r, rng);
        let posterior = InducingPosterior::init(ri, ci, cfg.whitened, cfg.max_sd_u, cfg.init_sd_u, cfg.mean_init_std, rng)?;
        let flow = FlowStack::new(ri * ci, cfg.flow_depth, rng);
        let fan = |n: usize| if cfg.sqrt_width_scaling { (n as f64).sqrt() } else { 1.0 };
        Ok(Self {
            w_pre,
            cfg: cfg.clone(),
            a_row,
            a_col,
            b_row,
            b_col,
            posterior,
            flow,
            sigma_half_a: cfg.prior_sd / fan(d_in),
            sigma_half_b: cfg.prior_sd / fan(r),
        })
    }

    pub fn with_posterior(mut self, posterior: InducingPosterior) -> Result<Self> {
        if posterior.shape() != self.posterior.shape() {
            return Err(Error::dim("with_posterior", "inducing shape differs"));
        }
        self.posterior = posterior;
        Ok(self)
    }

    pub fn with_flow(mut self, flow: FlowStack) -> Result<Self> {
        if flow.dim() != self.posterior.dim() {
            return Err(Error::dim("with_flow", "flow dimension differs from the inducing size"));
        }
        self.flow = flow;
        Ok(self)
    }

    pub fn config(&self) -> &LayerConfig {
        &self.cfg
    }

    pub fn w_pre(&self) -> &Matrix {
        &self.w_pre
    }

    pub fn posterior(&self) -> &InducingPosterior {
        &self.posterior
    }

    pub fn flow(&self) -> &FlowStack {
        &self.flow
    }

    pub fn sigma_half(&self) -> (f64, f64) {
        (self.sigma_half_a, self.sigma_half_b)
    }

    /// Number of entries of the adapted weight.
    pub fn weight_count(&self) -> usize {
        self.w_pre.len()
    }

    /// Trainable tensor total for a layer of this shape, excluding the
    /// shared λ.
    pub fn analytic_parameter_count(d_out: usize, d_in: usize, cfg: &LayerConfig) -> usize {
        let (ri, ci, r) = (cfg.inducing_rows, cfg.inducing_cols, cfg.lora_rank);
        let factor = |ind: usize, target: usize| ind * target + ind;
        let d = ri * ci;
        factor(ri, r) + factor(ci, d_in) + factor(ri, d_out) + factor(ci, r) + 2 * d + FlowStack::parameter_count_for(d, cfg.flow_depth)
    }

    pub fn projectors(&self) -> Result<(ProjectorPair, ProjectorPair)> {
        Ok((
            ProjectorPair::from_factors(&self.a_row, &self.a_col)?,
            ProjectorPair::from_factors(&self.b_row, &self.b_col)?,
        ))
    }

    /// Prior over the inducing matrix. The non-whitened prior uses the
    /// A-branch factors.
    pub fn prior(&self) -> Result<InducingPrior> {
        if self.posterior.whitened() {
            Ok(InducingPrior::Whitened)
        } else {
            InducingPrior::kronecker(&self.a_row.assemble_k()?, &self.a_col.assemble_k()?)
        }
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> LayerNoise {
        let (d_out, d_in) = self.w_pre.shape();
        let r = self.cfg.lora_rank;
        let eps_u = standard_normal_matrix(rng, self.posterior.dim(), s);
        let mut eps_a = Vec::with_capacity(s);
        let mut eps_b = Vec::with_capacity(s);
        for _ in 0..s {
            eps_a.push(standard_normal_matrix(rng, r, d_in));
            eps_b.push(standard_normal_matrix(rng, d_out, r));
        }
        LayerNoise { eps_u, eps_a, eps_b }
    }

    fn check_noise(&self, noise: &LayerNoise) -> Result<()> {
        let s = noise.samples();
        if s == 0 {
            return Err(Error::param("at least one sample is required"));
        }
        if noise.eps_u.shape() != (self.posterior.dim(), s) || noise.eps_b.len() != s {
            return Err(Error::dim("layer noise", "noise does not match the layer"));
        }
        Ok(())
    }

    pub fn sample_adapters<R: Rng + ?Sized>(&self, lambda: f64, s: usize, rng: &mut R) -> Result<Vec<AdapterSample>> {
        if s == 0 {
            return Err(Error::param("at least one sample is required"));
        }
        let noise = self.draw_noise(s, rng);
        self.sample_with_noise(lambda, &noise)
    }

    pub fn sample_with_noise(&self, lambda: f64, noise: &LayerNoise) -> Result<Vec<AdapterSample>> {
        self.check_noise(noise)?;
        let (pa, pb) = self.projectors()?;
        let (ri, ci) = self.posterior.shape();
        let m = Matrix::column(self.posterior.mean().as_slice());
        let sigma = self.posterior.sigma();
        let u0 = Matrix::from_fn(m.rows(), noise.samples(), |i, j| {
            m.get(i, 0) + sigma.as_slice()[i] * noise.eps_u.get(i, j)
        });
        let (u, _) = self.flow.forward_batch(&u0)?;
        let scale = self.cfg.scaling();
        (0..noise.samples())
            .map(|s| {
                let u_s = Matrix::new(ri, ci, u.col_vec(s))?;
                let a = pa.apply(&u_s)?.add(&noise.eps_a[s].scale(lambda * self.sigma_half_a))?;
                let b = pb.apply(&u_s)?.add(&noise.eps_b[s].scale(lambda * self.sigma_half_b))?;
                let delta_w = b.matmul(&a)?.scale(scale);
                Ok(AdapterSample { a, b, delta_w, u_raw: u_s })
            })
            .collect()
    }

    /// `W_pre x + (α/r)·B(A x)` for every sample; `x` is `d_in × n`.
    pub fn forward(&self, x: &Matrix, samples: &[AdapterSample]) -> Result<Vec<Matrix>> {
        if x.rows() != self.w_pre.cols() {
            return Err(Error::dim("layer forward", format!("input has {} rows, layer expects {}", x.rows(), self.w_pre.cols())));
        }
        let base = self.w_pre.matmul(x)?;
        let scale = self.cfg.scaling();
        samples
            .iter()
            .map(|s| base.add(&s.b.matmul(&s.a.matmul(x)?)?.scale(scale)))
            .collect()
    }

    /// `(α/r)·B̄(U)·Ā(U)` at `U = T_φ(m)`.
    pub fn deterministic_update(&self) -> Result<Matrix> {
        let (pa, pb) = self.projectors()?;
        let (u, _) = self.flow.forward_with_logdet(self.posterior.mean())?;
        Ok(pb.apply(&u)?.matmul(&pa.apply(&u)?)?.scale(self.cfg.scaling()))
    }

    pub fn merge_deterministic(&self) -> Result<Matrix> {
        self.w_pre.add(&self.deterministic_update()?)
    }

    /// Records one step's adapter draws on the tape and returns them with
    /// this layer's `KL(q(U) ‖ p(U))` node.
    pub fn draw_var<'t>(
        &self,
        tape: &'t Tape,
        prefix: &str,
        trainable: bool,
        lambda: Var<'t>,
        noise: &LayerNoise,
    ) -> Result<(DrawnAdapter<'t>, Var<'t>)> {
        self.check_noise(noise)?;
        let s = noise.samples();
        let (ri, ci) = self.posterior.shape();
        let d = ri * ci;
        let post_prefix = join(prefix, "q");
        let m = self.posterior.m_var(tape, &post_prefix, trainable);
        let sigma = self.posterior.sigma_var(tape, &post_prefix, trainable);
        let eps = tape.constant(noise.eps_u.clone());
        let u0 = eps.mul_col(&sigma.reshape(d, 1)?)?.add_col(&m.reshape(d, 1)?)?;
        let (u, logdet) = self.flow.forward_var(tape, &join(prefix, "flow"), trainable, u0)?;
        let (tr_a, k_ra) = self.a_row.projector_and_k_var(tape, &join(prefix, "a_row"), trainable, Side::Row)?;
        let (tc_a, k_ca) = self.a_col.projector_and_k_var(tape, &join(prefix, "a_col"), trainable, Side::Col)?;
        let tr_b = self.b_row.projector_var(tape, &join(prefix, "b_row"), trainable, Side::Row)?;
        let tc_b = self.b_col.projector_var(tape, &join(prefix, "b_col"), trainable, Side::Col)?;

        // the non-whitened prior shares its factors with the A branch
        let dense = if self.posterior.whitened() { None } else { Some(KroneckerPriorVar::new(k_ra, k_ca)?) };
        let kl_u = if self.flow.is_identity() {
            match &dense {
                Some(p) => p.closed_form_kl_var(&m, &sigma)?,
                None => closed_form_kl_var(tape, m, sigma, &InducingPrior::Whitened)?,
            }
        } else {
            let sq: f64 = noise.eps_u.as_slice().iter().map(|e| e * e).sum::<f64>() / s as f64;
            let log_q0 = sigma.ln().sum().scale(-1.0).offset(-0.5 * sq - 0.5 * d as f64 * std::f64::consts::TAU.ln());
            let mean_log_p = match &dense {
                Some(p) => p.mean_logpdf_var(&u)?,
                None => InducingPrior::Whitened.logpdf_var(tape, u)?.sum().scale(1.0 / s as f64),
            };
            log_q0.sub(&logdet.sum().scale(1.0 / s as f64))?.sub(&mean_log_p)?
        };

        let mut a = Vec::with_capacity(s);
        let mut b = Vec::with_capacity(s);
        for k in 0..s {
            let u_k = u.slice_cols(k, 1)?.reshape(ri, ci)?;
            let na = tape.constant(noise.eps_a[k].scale(self.sigma_half_a)).scale_by(&lambda)?;
            let nb = tape.constant(noise.eps_b[k].scale(self.sigma_half_b)).scale_by(&lambda)?;
            a.push(tr_a.matmul(&u_k)?.matmul(&tc_a)?.add(&na)?);
            b.push(tr_b.matmul(&u_k)?.matmul(&tc_b)?.add(&nb)?);
        }
        let drawn = DrawnAdapter {
            w_pre: tape.constant(self.w_pre.clone()),
            scale: self.cfg.scaling(),
            a,
            b,
        };
        Ok((drawn, kl_u))
    }
}

impl Parameterized for BayesLoraLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.posterior.visit_params(&join(prefix, "q"), f);
        self.flow.visit_params(&join(prefix, "flow"), f);
        self.a_row.visit_params(&join(prefix, "a_row"), f);
        self.a_col.visit_params(&join(prefix, "a_col"), f);
        self.b_row.visit_params(&join(prefix, "b_row"), f);
        self.b_col.visit_params(&join(prefix, "b_col"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.posterior.visit_params_mut(&join(prefix, "q"), f);
        self.flow.visit_params_mut(&join(prefix, "flow"), f);
        self.a_row.visit_params_mut(&join(prefix, "a_row"), f);
        self.a_col.visit_params_mut(&join(prefix, "a_col"), f);
        self.b_row.visit_params_mut(&join(prefix, "b_row"), f);
        self.b_col.visit_params_mut(&join(prefix, "b_col"), f);
    }
}

/// Deterministic low-rank adapter: `A ~ N(0, 1/d_in)`, `B = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    w_pre: Matrix,
    a: Matrix,
    b: Matrix,
    scale: f64,
}

impl LoraLayer {
    pub fn new<R: Rng + ?Sized>(w_pre: Matrix, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return Err(Error::param("LoRA rank must be at least 1"));
        }
        let (d_out, d_in) = w_pre.shape();
        let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).map_err(|e| Error::param(e.to_string()))?;
        let a = Matrix::from_fn(rank, d_in, |_, _| normal.sample(rng));
        Ok(Self {
            w_pre,
            a,
            b: Matrix::zeros(d_out, rank),
            scale: alpha / rank as f64,
        })
    }

    pub fn from_factors(w_pre: Matrix, a: Matrix, b: Matrix, scale: f64) -> Result<Self> {
        if a.cols() != w_pre.cols() || b.rows() != w_pre.rows() || a.rows() != b.cols() {
            return Err(Error::dim("LoraLayer::from_factors", "factor shapes do not match the weight"));
        }
        Ok(Self { w_pre, a, b, scale })
    }

    pub fn w_pre(&self) -> &Matrix {
        &self.w_pre
    }

    pub fn analytic_parameter_count(d_out: usize, d_in: usize, rank: usize) -> usize {
        rank * (d_out + d_in)
    }

    pub fn merged(&self) -> Result<Matrix> {
        self.w_pre.add(&self.b.matmul(&self.a)?.scale(self.scale))
    }

    pub fn draw_var<'t>(&self, tape: &'t Tape, prefix: &str, trainable: bool) -> DrawnAdapter<'t> {
        DrawnAdapter {
            w_pre: tape.constant(self.w_pre.clone()),
            scale: self.scale,
            a: vec![leaf(tape, join(prefix, "a"), &self.a, trainable)],
            b: vec![leaf(tape, join(prefix, "b"), &self.b, trainable)],
        }
    }
}

impl Parameterized for LoraLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "a"), &self.a);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "a"), &mut self.a);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// A named λ shared by every Bayesian layer of a model.
pub fn lambda_var<'t>(lambda: &Lambda, tape: &'t Tape, trainable: bool) -> Var<'t> {
    lambda.var(tape, "lambda.raw", trainable)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(d_out: usize, d_in: usize, cfg: &LayerConfig, seed: u64) -> BayesLoraLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Matrix::from_fn(d_out, d_in, |_, _| rng.random_range(-0.5..0.5));
        BayesLoraLayer::new(w, cfg, &mut rng).unwrap()
    }

    #[test]
    fn sample_shapes_and_delta_w() {
        let l = layer(6, 5, &LayerConfig::default(), 1);
        let samples = l.sample_adapters(0.01, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(samples.len(), 3);
        for s in &samples {
            assert_eq!(s.a.shape(), (8, 5));
            assert_eq!(s.b.shape(), (6, 8));
            assert_eq!(s.delta_w, s.b.matmul(&s.a).unwrap().scale(2.0));
            assert_eq!(s.u_raw.shape(), (9, 9));
        }
        assert!(l.sample_adapters(0.01, 0, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let l = layer(4, 4, &LayerConfig::default(), 3);
        let a = l.sample_adapters(0.02, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = l.sample_adapters(0.02, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hand_forward_case() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let cfg = LayerConfig { lora_rank: 2, alpha: 2.0, ..LayerConfig::default() };
        let l = BayesLoraLayer::new(w.clone(), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Matrix::from_rows(&[&[1.0, 0.5], &[-1.0, 2.0]]).unwrap();
        let sample = AdapterSample {
            a: Matrix::identity(2),
            b: Matrix::identity(2),
            delta_w: Matrix::identity(2),
            u_raw: Matrix::zeros(9, 9),
        };
        let out = l.forward(&x, &[sample]).unwrap();
        assert_eq!(out[0], w.add(&Matrix::identity(2)).unwrap().matmul(&x).unwrap());
        let zero = AdapterSample {
            a: Matrix::zeros(2, 2),
            b: Matrix::zeros(2, 2),
            delta_w: Matrix::zeros(2, 2),
            u_raw: Matrix::zeros(9, 9),
        };
        assert_eq!(l.forward(&x, &[zero]).unwrap()[0], w.matmul(&x).unwrap());
        assert!(l.forward(&Matrix::zeros(3, 1), &[]).is_err());
    }

    #[test]
    fn factored_forward_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (d_out, d_in) in [(3, 5), (16, 16), (8, 12)] {
            let l = layer(d_out, d_in, &LayerConfig::default(), 5);
            let samples = l.sample_adapters(0.03, 2, &mut rng).unwrap();
            let x = Matrix::from_fn(d_in, 7, |_, _| rng.random_range(-1.0..1.0));
            let outs = l.forward(&x, &samples).unwrap();
            for (s, o) in samples.iter().zip(&outs) {
                let dense = l.w_pre().add(&s.delta_w).unwrap().matmul(&x).unwrap();
                assert!(o.max_abs_diff(&dense) < 1e-12);
            }
        }
    }

    #[test]
    fn zero_mean_identity_flow_merges_to_base() {
        let cfg = LayerConfig { flow_depth: 0, mean_init_std: 0.0, ..LayerConfig::default() };
        let l = layer(5, 4, &cfg, 6);
        assert_eq!(l.merge_deterministic().unwrap(), *l.w_pre());
    }

    #[test]
    fn tape_draw_matches_plain_samples() {
        let cfg = LayerConfig { flow_depth: 1, ..LayerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = layer(6, 4, &cfg, 8).with_flow(FlowStack::random(81, 1, 0.2, &mut rng)).unwrap();
        let noise = l.draw_noise(3, &mut rng);
        let plain = l.sample_with_noise(0.02, &noise).unwrap();
        let tape = Tape::new();
        let (drawn, kl) = l.draw_var(&tape, "layer", true, tape.scalar(0.02), &noise).unwrap();
        assert!(kl.item().is_finite());
        let x = Matrix::from_fn(4, 5, |i, j| (i as f64 - j as f64) * 0.2);
        let outs = l.forward(&x, &plain).unwrap();
        for (s, o) in outs.iter().enumerate() {
            let v = drawn.apply(s, tape.constant(x.clone())).unwrap().value();
            assert!(v.max_abs_diff(o) < 1e-12);
        }
    }

    #[test]
    fn parameter_count_matches_analytic() {
        for depth in [0, 1, 2] {
            let cfg = LayerConfig { flow_depth: depth, ..LayerConfig::default() };
            let l = layer(32, 16, &cfg, 9);
            assert_eq!(l.parameter_count(), BayesLoraLayer::analytic_parameter_count(32, 16, &cfg));
        }
        let lora = LoraLayer::new(Matrix::zeros(32, 16), 8, 16.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(lora.parameter_count(), LoraLayer::analytic_parameter_count(32, 16, 8));
    }

    #[test]
    fn gradients_reach_all_parameters_but_not_base() {
        let l = layer(4, 3, &LayerConfig::default(), 10);
        let lambda = Lambda::learned(0.001, 0.03).unwrap();
        let noise = l.draw_noise(2, &mut ChaCha8Rng::seed_from_u64(11));
        let tape = Tape::new();
        let lv = lambda_var(&lambda, &tape, true);
        let (drawn, kl) = l.draw_var(&tape, "layer", true, lv, &noise).unwrap();
        let x = tape.constant(Matrix::filled(3, 2, 0.5));
        let out = drawn.apply(0, x).unwrap().add(&drawn.apply(1, x).unwrap()).unwrap();
        let loss = out.square().sum().add(&kl).unwrap();
        let grads = tape.grad(loss).unwrap();
        let mut expected = vec!["lambda.raw".to_string()];
        l.visit_params("layer", &mut |n, _| expected.push(n.to_string()));
        let names: Vec<String> = grads.names().cloned().collect();
        for n in &expected {
            assert!(names.contains(n), "missing gradient for {n}");
        }
        assert_eq!(names.len(), expected.len());
        assert!(!names.iter().any(|n| n.contains("w_pre")));
    }
}
