//! Bayesian low-rank adapters.
//!
//! A frozen weight `W_pre` is adapted by a stochastic low-rank update
//! `ΔW = (α/r)·B·A` whose factors are bilinear projections `T_r·U·T_c` of a
//! small inducing matrix `U`. The posterior over `U` is a diagonal Gaussian
//! pushed through a masked autoregressive flow, trained by maximizing a
//! three-term ELBO. The crate also ships calibration metrics, desk-scale
//! synthetic benchmarks, and a constrained multi-objective Bayesian
//! optimizer for the learning-rate / weight-decay pair.

pub mod error;
pub mod flow;
pub mod hpo;
pub mod kron;
pub mod layer;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod params;
pub mod posterior;
pub mod rng;
pub mod tape;
pub mod toybench;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use tape::{Gradients, Tape, Var};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
