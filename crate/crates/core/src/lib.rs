// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exact Bayesian inference for changepoint models with changepoint-induced
//! independence.
//!
//! The model: a latent piecewise-constant height sequence `x_1..x_n` switches
//! value at changepoints; segment lengths follow a length prior (geometric or
//! negative binomial), segment heights are drawn i.i.d. from a height prior,
//! and observations `y_i` are conditionally independent given the height.
//!
//! The engine works on *particles*: run-length weights
//!
//! ```text
//! c_ji = P(C_i = j | y_1..y_i)
//! ```
//!
//! where `C_i` is the most recent changepoint at or before `i` (0 if none).
//! Everything downstream — MAP segmentation, exact posterior sampling,
//! marginal changepoint probabilities, moment trajectories, EM — consumes the
//! sparse triangular particle table produced by the forward filter, optionally
//! pruned on the fly.
//!
//! Modules mirror the pipeline:
//!
//! * [`model`] — length priors, hazard tables, observation families, config.
//! * [`conjugate`] — exponential-family segment kernels (Gaussian mean /
//!   Gaussian variance).
//! * [`laplace`] — Laplacian change-in-median kernel with closed-form
//!   piecewise-exponential integrals.
//! * [`forward`] — forward filter and pruned variant.
//! * [`posterior`] — backward weights, config likelihood, MAP, exact sampling,
//!   entropy.
//! * [`pointwise`] — marginal changepoint probabilities and linear-time
//!   moment trajectories.
//! * [`em`] — EM steps and driver for q, τ, σ.
//! * [`credible`] — sample-based simultaneous credible regions (greedy SBP,
//!   brute force, ILP export, baselines, importance).
//! * [`simulate`] — ground-truth generators.

#![forbid(unsafe_code)]

pub mod conjugate;
pub mod credible;
pub mod em;
pub mod forward;
pub mod kernel;
pub mod laplace;
pub mod model;
pub mod pointwise;
pub mod posterior;
pub mod simulate;

/// Errors surfaced by the inference engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A model parameter violates its domain (negative scale, q outside
    /// (0,1), NegBin q > r/(r+1), ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    /// Input data violates a precondition (empty series, non-finite value).
    #[error("invalid data: {0}")]
    InvalidData(String),
    /// A requested quantity does not exist (e.g. undefined posterior moment).
    #[error("undefined quantity: {0}")]
    Undefined(String),
    /// A numeric computation failed (non-finite predictive, root outside its
    /// bracket). Carries enough context to locate the failure.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Problem size exceeds a hard guard (e.g. brute-force enumeration).
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
