// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dispatch glue between observation families and their segment kernels.
//!
//! Every forward-pass particle carries a [`KernelState`]: the posterior law
//! `H_ji` of the segment height given the segment's data so far. Absorbing an
//! observation advances the state and returns the log predictive `ln r_ji`.

use rand::Rng;

use crate::conjugate::{GaussianMeanState, GaussianVarState};
use crate::laplace::LaplaceSegState;
use crate::model::ObservationFamily;
use crate::{Error, Result};

/// Posterior height law of one segment, specialized per family.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelState {
    GaussianMean(GaussianMeanState),
    GaussianVar(GaussianVarState),
    Laplace(LaplaceSegState),
}

impl ObservationFamily {
    /// Fresh kernel state: the height prior, no observations absorbed.
    pub fn fresh_state(&self) -> KernelState {
        match *self {
            ObservationFamily::GaussianMeanKnownVar { mu0, tau0, .. } => {
                KernelState::GaussianMean(GaussianMeanState::prior(mu0, tau0))
            }
            ObservationFamily::GaussianVarKnownMean { alpha, beta, .. } => {
                KernelState::GaussianVar(GaussianVarState::prior(alpha, beta))
            }
            ObservationFamily::LaplaceMedian { mu, tau, .. } => {
                KernelState::Laplace(LaplaceSegState::prior(mu, tau))
            }
        }
    }

    /// Absorbs `y` into `state`; returns the log predictive.
    pub fn update_state(&self, state: &mut KernelState, y: f64) -> Result<f64> {
        match (*self, state) {
            (
                ObservationFamily::GaussianMeanKnownVar { sigma, .. },
                KernelState::GaussianMean(st),
            ) => Ok(st.update(y, sigma)),
            (
                ObservationFamily::GaussianVarKnownMean { mu, .. },
                KernelState::GaussianVar(st),
            ) => Ok(st.update(y, mu)),
            (ObservationFamily::LaplaceMedian { sigma, .. }, KernelState::Laplace(st)) => {
                st.insert(y, sigma)
            }
            _ => Err(Error::InvalidParameter(
                "kernel state does not match observation family".into(),
            )),
        }
    }

    /// Raw posterior moment `E[X^m]` of the segment height, `m` in `1..=3`.
    pub fn state_moment(&self, state: &KernelState, m: u32) -> Result<f64> {
        match state {
            KernelState::GaussianMean(st) => st.moment(m),
            KernelState::GaussianVar(st) => st.moment(m),
            KernelState::Laplace(st) => st.moment(m),
        }
    }

    /// Exact draw of the segment height from the posterior.
    pub fn sample_height<R: Rng + ?Sized>(&self, state: &KernelState, rng: &mut R) -> f64 {
        match state {
            KernelState::GaussianMean(st) => st.sample(rng),
            KernelState::GaussianVar(st) => st.sample(rng),
            KernelState::Laplace(st) => st.sample(rng),
        }
    }

    /// Runs a fresh kernel over a segment of observations; returns the final
    /// state and the summed log predictives (the segment's log marginal
    /// likelihood contribution).
    pub fn run_segment(&self, ys: &[f64]) -> Result<(KernelState, f64)> {
        let mut state = self.fresh_state();
        let mut total = 0.0;
        for &y in ys {
            total += self.update_state(&mut state, y)?;
        }
        Ok((state, total))
    }
}

impl KernelState {
    /// The Laplace state, if this kernel is Laplacian.
    pub fn as_laplace(&self) -> Option<&LaplaceSegState> {
        match self {
            KernelState::Laplace(st) => Some(st),
            _ => None,
        }
    }

    /// The inverse-gamma state, if this kernel is Gaussian change in
    /// variance.
    pub fn as_gaussian_var(&self) -> Option<&GaussianVarState> {
        match self {
            KernelState::GaussianVar(st) => Some(st),
            _ => None,
        }
    }
}
