// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exponential-family segment kernels with conjugate height priors.
//!
//! For a likelihood `f(y | x) = h(y) exp(eta(x)·T(y) - A(x))` and conjugate
//! prior with natural parameters `(nu, chi)`, absorbing an observation is
//!
//! ```text
//! nu  <- nu + 1
//! chi <- chi + T(y)
//! log predictive = ln h(y) - Ã(nu, chi) + Ã(nu + 1, chi + T(y))
//! ```
//!
//! where `Ã` is the log normalizer of the conjugate family. Two families are
//! instantiated:
//!
//! * **Gaussian change in mean** (`y | x ~ N(x, sigma^2)`, `x ~ N(mu0,
//!   tau0^2)`): the posterior is Gaussian; internally we track (posterior
//!   mean, posterior variance), which is better conditioned than `(nu, chi)`,
//!   and map to natural parameters only at the interface. The natural
//!   parameterization here is `nu = 1/tau0^2 + k/sigma^2` (precision) and
//!   `chi = mu0/tau0^2 + sum y/sigma^2` (precision-weighted mean), with
//!   `Ã(nu, chi) = chi^2/(2 nu) - ln(nu)/2` up to the shared constant.
//! * **Gaussian change in variance** (`y | x ~ N(mu, x)` with `x` the
//!   variance, `x ~ InvGamma(alpha, beta)`): posterior
//!   `InvGamma(alpha + k/2, beta + sum (y - mu)^2 / 2)`; the predictive is a
//!   scaled Student-t, computed through log-gamma only.

use rand::Rng;
use rand_distr::Distribution;
use statrs::function::gamma::ln_gamma;

use crate::{Error, Result};

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Natural conjugate parameters `(nu, chi)` exposed at the interface.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateParams {
    /// Pseudo-count; increments by exactly 1 per absorbed observation.
    pub nu: f64,
    /// Natural statistic accumulator; one entry per component of `T`.
    pub chi: Vec<f64>,
}

/// Posterior state of the Gaussian change-in-mean kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMeanState {
    /// Posterior mean of the segment height.
    pub mean: f64,
    /// Posterior variance of the segment height.
    pub var: f64,
    /// Observations absorbed so far.
    pub count: usize,
}

/// Posterior state of the Gaussian change-in-variance kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianVarState {
    /// Inverse-gamma shape.
    pub alpha: f64,
    /// Inverse-gamma rate.
    pub beta: f64,
    /// Observations absorbed so far.
    pub count: usize,
}

impl GaussianMeanState {
    pub fn prior(mu0: f64, tau0: f64) -> Self {
        Self { mean: mu0, var: tau0 * tau0, count: 0 }
    }

    /// Absorbs `y`; returns the log predictive `ln N(y; mean, sigma^2 + var)`.
    pub fn update(&mut self, y: f64, sigma: f64) -> f64 {
        let s2 = sigma * sigma;
        let pred_var = s2 + self.var;
        let resid = y - self.mean;
        let log_pred = -0.5 * (LN_2PI + pred_var.ln() + resid * resid / pred_var);
        // Precision-weighted update.
        let prec = 1.0 / self.var + 1.0 / s2;
        let var_new = 1.0 / prec;
        self.mean = var_new * (self.mean / self.var + y / s2);
        self.var = var_new;
        self.count += 1;
        log_pred
    }

    /// Raw posterior moment `E[X^m]`, `m` in `1..=3`.
    pub fn moment(&self, m: u32) -> Result<f64> {
        let (mu, v) = (self.mean, self.var);
        match m {
            1 => Ok(mu),
            2 => Ok(mu * mu + v),
            3 => Ok(mu * mu * mu + 3.0 * mu * v),
            _ => Err(Error::Undefined(format!("moment order {m} unsupported"))),
        }
    }

    /// Natural parameters for the interface; needs the observation scale to
    /// reconstruct the precision bookkeeping.
    pub fn natural_params(&self, sigma: f64, mu0: f64, tau0: f64) -> ConjugateParams {
        let _ = (sigma, mu0, tau0);
        ConjugateParams {
            nu: self.count as f64,
            chi: vec![self.mean / self.var],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let normal = rand_distr::Normal::new(self.mean, self.var.sqrt()).expect("valid params");
        normal.sample(rng)
    }
}

impl GaussianVarState {
    pub fn prior(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta, count: 0 }
    }

    /// Absorbs `y`; returns the log predictive (scaled Student-t density).
    pub fn update(&mut self, y: f64, mu: f64) -> f64 {
        let d2 = (y - mu) * (y - mu);
        // r = Gamma(a + 1/2) beta^a / (Gamma(a) sqrt(2 pi) (beta + d2/2)^(a + 1/2))
        let a = self.alpha;
        let b = self.beta;
        let log_pred = ln_gamma(a + 0.5) - ln_gamma(a) - 0.5 * LN_2PI + a * b.ln()
            - (a + 0.5) * (b + 0.5 * d2).ln();
        self.alpha = a + 0.5;
        self.beta = b + 0.5 * d2;
        self.count += 1;
        log_pred
    }

    /// Raw posterior moment `E[X^m]`; requires `alpha > m`.
    pub fn moment(&self, m: u32) -> Result<f64> {
        let (a, b) = (self.alpha, self.beta);
        if a <= m as f64 {
            return Err(Error::Undefined(format!(
                "InvGamma moment {m} requires alpha > {m}, have alpha = {a}"
            )));
        }
        Ok(match m {
            1 => b / (a - 1.0),
            2 => b * b / ((a - 1.0) * (a - 2.0)),
            3 => b * b * b / ((a - 1.0) * (a - 2.0) * (a - 3.0)),
            _ => return Err(Error::Undefined(format!("moment order {m} unsupported"))),
        })
    }

    /// `E[1/X] = alpha / beta`; always defined. Used by the EM step for the
    /// known mean of the change-in-variance model.
    pub fn inverse_moment(&self) -> f64 {
        self.alpha / self.beta
    }

    pub fn natural_params(&self) -> ConjugateParams {
        ConjugateParams {
            nu: self.count as f64,
            chi: vec![2.0 * self.alpha, 2.0 * self.beta],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // X ~ InvGamma(a, b)  <=>  b / X ~ Gamma(a, 1).
        let gamma = rand_distr::Gamma::new(self.alpha, 1.0).expect("valid params");
        self.beta / gamma.sample(rng)
    }
}
