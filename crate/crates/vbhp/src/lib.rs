//! Variational Bayesian inference for non-parametric Hawkes processes.
//!
//! The triggering kernel is modeled as the square of a sparse Gaussian
//! process (ARD kernel, inducing points on a regular grid) and the background
//! intensity carries a Gamma prior. Inference alternates a closed-form
//! branching-posterior E-step with gradient-based M-step updates of the
//! Gaussian and Gamma variational factors, maximizing the ELBO; the
//! data-dependent expectation doubles as a tighter marginal-likelihood bound
//! used for hyperparameter selection.
//!
//! Modules:
//! - [`special`]: erf, log-gamma, digamma/trigamma, regularized incomplete
//!   gamma, Gamma quantiles, and the tabulated G̃ function behind E[log f²].
//! - [`gp`]: ARD kernel algebra, inducing grids, Cholesky-backed Gram solves,
//!   posterior moments, and closed-form Ψ integrals over truncated windows.
//! - [`events`]: event sequences and CSV/JSON ingestion.
//! - [`sim`]: Ogata-thinning simulation with optional branching records.
//! - [`engine`]: the variational EM loop, ELBO, gradients, and prediction.
//! - [`eval`]: L₂/HLL metrics, thinning splits, grid model selection, and
//!   scaling benchmarks.
//! - [`model`]: version-tagged model persistence with bit-exact round trips.

pub mod engine;
pub mod error;
pub mod eval;
pub mod events;
pub mod gp;
pub mod model;
pub mod sim;
pub mod special;

pub use engine::{
    approx_log_marginal, background_mode, dde, e_step, elbo, fit, gamma_mode, kl_gamma,
    interp1, kl_gaussian_u, m_step, predictive_kernel, predictive_mode, predictive_mode_curve,
    BranchingPosterior, FitConfig, FitContext, FitReport, Priors, VariationalState,
};
pub use error::{Error, Result};
pub use eval::{
    benchmark_scaling, grid_select, hll, l2_mu, l2_phi, log_log_slope, log_spaced, split,
    EvalConfig, GridSelection,
};
pub use events::{load_events, save_events, EventFormat, EventSequence};
pub use gp::{Domain, GpContext, InducingGrid, KernelConfig};
pub use model::{ModelFile, MODEL_VERSION};
pub use sim::{simulate, SimConfig, Simulation, TriggeringKernel};
