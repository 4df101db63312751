// SPDX-License-Identifier: MIT OR Apache-2.0

//! EM parameter estimation from the particle posterior.
//!
//! Each M-step maximizes an expected complete-data loglikelihood (the
//! "surrogate") whose sufficient statistics are single weighted sums over the
//! live particles: a particle `(j, i)` enters with weight
//!
//! ```text
//! w_ji = c̃_ji q̃_{i+1}   (i < n)          w_jn = c̃_jn
//! ```
//!
//! the probability that the realized segmentation contains the segment
//! `[j, i]`. Steps are provided for the segment-length parameter `q`
//! (geometric mean rule, per-timepoint survival, negative binomial via a
//! quadratic root), the Laplace height scale `τ`, the Laplace observation
//! scale `σ`, and the Gaussian-family observation parameters. The driver
//! iterates filter → backward → marginals → steps until the parameter vector
//! stabilizes, with oscillation detection.
//!
//! Each step exposes its accumulated constants so the surrogate objective can
//! be evaluated directly at any parameter value (optimality checks).

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use serde::Serialize;

use crate::forward::{filter_auto, log_marginal_likelihood};
use crate::kernel::KernelState;
use crate::model::{
    residual_success_prob, LengthPrior, ModelConfig, ObservationFamily, TimeSeries,
};
use crate::pointwise::changepoint_marginals;
use crate::posterior::{backward_weights, BackwardTable};
use crate::{Error, Result};

const CLAMP_EPS: f64 = 1e-12;

#[inline]
fn particle_weight(i: usize, n: usize, c: f64, qtilde: &[f64]) -> f64 {
    if i == n {
        c
    } else {
        c * qtilde[i] // qtilde[i] = q̃_{i+1} (0-based slice)
    }
}

/// Geometric length prior: `q_new` = mean of the changepoint marginals,
/// clamped into `(ε, 1−ε)`.
pub fn em_step_geometric(qtilde: &[f64]) -> f64 {
    let mean = qtilde.iter().sum::<f64>() / qtilde.len() as f64;
    mean.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
}

/// Surrogate maximized by [`em_step_geometric`]:
/// `Σ_i q̃_i ln q + (1 − q̃_i) ln(1 − q)`.
pub fn geometric_objective(qtilde: &[f64], q: f64) -> f64 {
    qtilde
        .iter()
        .map(|&t| t * q.ln() + (1.0 - t) * (1.0 - q).ln())
        .sum()
}

/// Per-timepoint length prior: the survival probability at each timepoint
/// becomes `q^i = 1 − q̃_i`.
pub fn em_step_per_timepoint(qtilde: &[f64]) -> Vec<f64> {
    qtilde.iter().map(|&t| 1.0 - t).collect()
}

/// Sufficient statistics of the negative-binomial surrogate
/// `c1 ln q + c2 ln(1−q) + c3 ln(1 − q/(r(1−q)))`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NegBinCoeffs {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Live particles visited during accumulation.
    pub touched: usize,
}

/// Conditional mean `E[M | M ≥ cutoff]` of the negative-binomial failure
/// count `M ~ NB(q, r)`, by direct summation until the tail is negligible.
pub fn negbin_tail_conditional_mean(q: f64, r: u32, cutoff: usize) -> f64 {
    if cutoff == 0 {
        return f64::from(r) * (1.0 - q) / q;
    }
    // Terms relative to the pmf at the cutoff; the ratio recurrence avoids
    // underflow for deep tails.
    let r = f64::from(r);
    let mut m = cutoff as f64;
    let mut ratio = 1.0f64;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    loop {
        num += m * ratio;
        den += ratio;
        let step = (m + r) / (m + 1.0) * (1.0 - q);
        ratio *= step;
        m += 1.0;
        if step < 1.0 && m * ratio < 1e-14 * num {
            break;
        }
    }
    num / den
}

/// Accumulates the surrogate coefficients at the current parameter `q_old`.
pub fn negbin_coeffs(
    bt: &BackwardTable,
    qtilde: &[f64],
    r: u32,
    q_old: f64,
) -> Result<NegBinCoeffs> {
    let rf = f64::from(r);
    if !(q_old > 0.0 && q_old <= rf / (rf + 1.0)) {
        return Err(Error::InvalidParameter(format!(
            "q must lie in (0, r/(r+1)]; got {q_old}"
        )));
    }
    let n = bt.n();
    let q_res_old = residual_success_prob(q_old, r)?;
    let mut c = NegBinCoeffs {
        c1: 0.0,
        c2: 0.0,
        c3: 0.0,
        touched: 0,
    };
    for i in 1..=n {
        for &(j, w) in bt.col(i) {
            c.touched += 1;
            let weight = particle_weight(i, n, w, qtilde);
            if weight == 0.0 {
                continue;
            }
            match (j, i == n) {
                (0, false) => {
                    // Head segment under the geometric surrogate with
                    // residual success probability q' = q/(r(1−q)).
                    c.c1 += weight;
                    c.c2 -= weight;
                    c.c3 += weight * i as f64;
                }
                (0, true) => {
                    // No change at all: memoryless truncated survival mean.
                    c.c3 += weight * (n as f64 + (1.0 - q_res_old) / q_res_old);
                }
                (_, false) => {
                    c.c1 += weight * rf;
                    c.c2 += weight * (i - j) as f64;
                }
                (_, true) => {
                    c.c1 += weight * rf;
                    c.c2 += weight * negbin_tail_conditional_mean(q_old, r, n - j);
                }
            }
        }
    }
    if !(c.c1 > 0.0) || !(c.c3 > 0.0) {
        return Err(Error::Numeric(format!(
            "degenerate surrogate coefficients c1={} c3={}",
            c.c1, c.c3
        )));
    }
    Ok(c)
}

/// The surrogate objective `c1 ln q + c2 ln(1−q) + c3 ln(1 − q/(r(1−q)))`.
pub fn negbin_objective(c: &NegBinCoeffs, q: f64, r: u32) -> f64 {
    let rf = f64::from(r);
    c.c1 * q.ln() + c.c2 * (1.0 - q).ln() + c.c3 * (1.0 - q / (rf * (1.0 - q))).ln()
}

/// Unique stationary point of the surrogate in `(0, r/(r+1))`: the smaller
/// root of `q²(r+1)(c1+c2) − q(c1(2r+1) + c2 r + c3) + c1 r = 0`, computed
/// in the cancellation-free form `2C / (B + sqrt(B² − 4AC))`.
pub fn negbin_root(c: &NegBinCoeffs, r: u32) -> Result<f64> {
    let rf = f64::from(r);
    let a = (rf + 1.0) * (c.c1 + c.c2);
    let b = c.c1 * (2.0 * rf + 1.0) + c.c2 * rf + c.c3;
    let cc = c.c1 * rf;
    let disc = b * b - 4.0 * a * cc;
    if disc < 0.0 {
        return Err(Error::Numeric("negative discriminant in length-prior update".into()));
    }
    let q = 2.0 * cc / (b + disc.sqrt());
    if !(q > 0.0 && q < rf / (rf + 1.0)) {
        return Err(Error::Numeric(format!(
            "length-prior update {q} escaped (0, r/(r+1))"
        )));
    }
    Ok(q)
}

/// Negative-binomial M-step: accumulate coefficients at `q_old`, solve the
/// quadratic stationarity condition.
pub fn em_step_negbin(bt: &BackwardTable, qtilde: &[f64], r: u32, q_old: f64) -> Result<f64> {
    let c = negbin_coeffs(bt, qtilde, r, q_old)?;
    negbin_root(&c, r)
}

/// Weighted particle accumulation of a pair of segment functionals. Rows are
/// processed independently (in parallel when enabled) with a
/// deterministic-order final reduction. The functional receives the kernel
/// state together with the segment bounds `[start, end]` (1-based).
fn accumulate_particles<F>(
    bt: &BackwardTable,
    qtilde: &[f64],
    data: &TimeSeries,
    family: &ObservationFamily,
    skip_head: bool,
    f: F,
) -> Result<([f64; 2], usize)>
where
    F: Fn(&KernelState, usize, usize) -> Result<[f64; 2]> + Sync,
{
    let n = bt.n();
    let rows = bt.rows();
    let row_sum = |j: usize, entries: &Vec<(usize, f64)>| -> Result<([f64; 2], usize)> {
        if entries.is_empty() || (skip_head && j == 0) {
            return Ok(([0.0; 2], 0));
        }
        let start = j.max(1);
        let mut state = family.fresh_state();
        let mut pos = start;
        let mut acc = [0.0f64; 2];
        let mut touched = 0usize;
        for &(i, c) in entries {
            while pos <= i {
                family.update_state(&mut state, data.value(pos))?;
                pos += 1;
            }
            touched += 1;
            let w = particle_weight(i, n, c, qtilde);
            if w != 0.0 {
                let v = f(&state, start, i)?;
                acc[0] += w * v[0];
                acc[1] += w * v[1];
            }
        }
        Ok((acc, touched))
    };
    #[cfg(feature = "parallel")]
    let partials: Result<Vec<_>> = rows
        .par_iter()
        .enumerate()
        .map(|(j, entries)| row_sum(j, entries))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let partials: Result<Vec<_>> = rows
        .iter()
        .enumerate()
        .map(|(j, entries)| row_sum(j, entries))
        .collect();
    let mut total = [0.0f64; 2];
    let mut touched = 0usize;
    for (acc, t) in partials? {
        total[0] += acc[0];
        total[1] += acc[1];
        touched += t;
    }
    Ok((total, touched))
}

/// Outcome of the Laplace height-scale step `τ_new = M₀ / Σ q̃`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TauStep {
    /// `None` when `Σ q̃ = 0` (no posterior changepoint mass): τ unchanged.
    pub tau: Option<f64>,
    /// `Σ_i E[|X_i − μ| 1{C_i = i} | y]`.
    pub m0: f64,
    pub sum_qtilde: f64,
    pub touched: usize,
}

pub fn em_step_tau(
    bt: &BackwardTable,
    qtilde: &[f64],
    data: &TimeSeries,
    family: &ObservationFamily,
) -> Result<TauStep> {
    let mu = match family {
        ObservationFamily::LaplaceMedian { mu, .. } => *mu,
        _ => {
            return Err(Error::InvalidParameter(
                "height-scale step requires the Laplace kernel".into(),
            ))
        }
    };
    let ([m0, _], touched) = accumulate_particles(bt, qtilde, data, family, true, |state, _, _| {
        let lap = state
            .as_laplace()
            .ok_or_else(|| Error::InvalidParameter("non-Laplace kernel state".into()))?;
        Ok([lap.abs_moment(mu), 0.0])
    })?;
    let sum_qtilde: f64 = qtilde.iter().sum();
    let tau = if sum_qtilde > 0.0 {
        Some(m0 / sum_qtilde)
    } else {
        None
    };
    Ok(TauStep {
        tau,
        m0,
        sum_qtilde,
        touched,
    })
}

/// Surrogate maximized by [`em_step_tau`]: `−M₀/τ − (Σq̃) ln(2τ)`.
pub fn tau_objective(m0: f64, sum_qtilde: f64, tau: f64) -> f64 {
    -m0 / tau - sum_qtilde * (2.0 * tau).ln()
}

/// Outcome of the Laplace observation-scale step `σ_new = M₁ / n`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SigmaStep {
    pub sigma: f64,
    /// `Σ_i E[|y_i − X_i| | y]`, accumulated per particle as
    /// `σ·E[energy] − (σ/τ)·E|X − μ|`.
    pub m1: f64,
    pub touched: usize,
}

pub fn em_step_sigma(
    bt: &BackwardTable,
    qtilde: &[f64],
    data: &TimeSeries,
    family: &ObservationFamily,
) -> Result<SigmaStep> {
    let (mu, tau, sigma) = match family {
        ObservationFamily::LaplaceMedian { mu, tau, sigma } => (*mu, *tau, *sigma),
        _ => {
            return Err(Error::InvalidParameter(
                "observation-scale step requires the Laplace kernel".into(),
            ))
        }
    };
    let ([m1, _], touched) = accumulate_particles(bt, qtilde, data, family, false, |state, _, _| {
        let lap = state
            .as_laplace()
            .ok_or_else(|| Error::InvalidParameter("non-Laplace kernel state".into()))?;
        let o = sigma * lap.energy_expectation() - (sigma / tau) * lap.abs_moment(mu);
        Ok([o, 0.0])
    })?;
    let n = bt.n() as f64;
    Ok(SigmaStep {
        sigma: m1 / n,
        m1,
        touched,
    })
}

/// Surrogate maximized by [`em_step_sigma`]: `−n ln(2σ) − M₁/σ`.
pub fn sigma_objective(m1: f64, n: usize, sigma: f64) -> f64 {
    -(n as f64) * (2.0 * sigma).ln() - m1 / sigma
}

/// Outcome of the Gaussian change-in-mean noise step
/// `σ²_new = (1/n) Σ_i E[(y_i − X_i)²]`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GaussianSigmaStep {
    pub sigma: f64,
    /// `Σ_i E[(y_i − X_i)²]`.
    pub ss: f64,
    pub touched: usize,
}

pub fn em_step_gaussian_sigma(
    bt: &BackwardTable,
    qtilde: &[f64],
    data: &TimeSeries,
    family: &ObservationFamily,
) -> Result<GaussianSigmaStep> {
    if !matches!(family, ObservationFamily::GaussianMeanKnownVar { .. }) {
        return Err(Error::InvalidParameter(
            "noise step requires the Gaussian change-in-mean kernel".into(),
        ));
    }
    // Prefix sums of y and y² for per-segment residual second moments.
    let n = bt.n();
    let mut py = vec![0.0f64; n + 1];
    let mut py2 = vec![0.0f64; n + 1];
    for i in 1..=n {
        let y = data.value(i);
        py[i] = py[i - 1] + y;
        py2[i] = py2[i - 1] + y * y;
    }
    let ([ss, _], touched) =
        accumulate_particles(bt, qtilde, data, family, false, |state, start, end| {
            let m1 = family.state_moment(state, 1)?;
            let m2 = family.state_moment(state, 2)?;
            let len = (end - start + 1) as f64;
            let sy = py[end] - py[start - 1];
            let sy2 = py2[end] - py2[start - 1];
            Ok([sy2 - 2.0 * sy * m1 + len * m2, 0.0])
        })?;
    Ok(GaussianSigmaStep {
        sigma: (ss / n as f64).sqrt(),
        ss,
        touched,
    })
}

/// Surrogate maximized by [`em_step_gaussian_sigma`]:
/// `−n ln σ − SS/(2σ²)`.
pub fn gaussian_sigma_objective(ss: f64, n: usize, sigma: f64) -> f64 {
    -(n as f64) * sigma.ln() - ss / (2.0 * sigma * sigma)
}

/// Outcome of the Gaussian change-in-variance mean step
/// `μ_new = Σ_i y_i E[1/X_i] / Σ_i E[1/X_i]`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GaussianMuStep {
    pub mu: f64,
    /// `Σ_i y_i E[1/X_i]`.
    pub num: f64,
    /// `Σ_i E[1/X_i]`.
    pub den: f64,
    pub touched: usize,
}

pub fn em_step_gaussian_mu(
    bt: &BackwardTable,
    qtilde: &[f64],
    data: &TimeSeries,
    family: &ObservationFamily,
) -> Result<GaussianMuStep> {
    if !matches!(family, ObservationFamily::GaussianVarKnownMean { .. }) {
        return Err(Error::InvalidParameter(
            "mean step requires the Gaussian change-in-variance kernel".into(),
        ));
    }
    let n = bt.n();
    let mut py = vec![0.0f64; n + 1];
    for i in 1..=n {
        py[i] = py[i - 1] + data.value(i);
    }
    let ([num, den], touched) =
        accumulate_particles(bt, qtilde, data, family, false, |state, start, end| {
            let inv = state
                .as_gaussian_var()
                .ok_or_else(|| Error::InvalidParameter("non-conjugate kernel state".into()))?
                .inverse_moment();
            let len = (end - start + 1) as f64;
            let sy = py[end] - py[start - 1];
            Ok([sy * inv, len * inv])
        })?;
    if !(den > 0.0) {
        return Err(Error::Numeric("vanishing precision mass in mean step".into()));
    }
    Ok(GaussianMuStep {
        mu: num / den,
        num,
        den,
        touched,
    })
}

/// Surrogate maximized by [`em_step_gaussian_mu`] (up to μ-free terms):
/// `μ·num − μ²·den/2`.
pub fn gaussian_mu_objective(num: f64, den: f64, mu: f64) -> f64 {
    mu * num - 0.5 * mu * mu * den
}

/// Parameters the EM driver may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EmTarget {
    /// Segment-length parameter (geometric or negative-binomial `q`).
    Q,
    /// Laplace height scale `τ`.
    Tau,
    /// Observation parameter: Laplace/Gaussian-mean noise scale `σ`, or the
    /// known mean `μ` of the change-in-variance kernel.
    Sigma,
}

/// Driver configuration.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EmConfig {
    /// Relative parameter-change threshold for convergence.
    pub tol: f64,
    pub max_iter: usize,
    /// How many past iterates are compared for oscillation detection.
    pub osc_window: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
            osc_window: 8,
        }
    }
}

/// Record of an EM run. `iterates[ℓ]` holds the active parameters after ℓ
/// steps in target order (q, τ, σ as applicable); `logliks[ℓ]` is the
/// marginal loglikelihood at `iterates[ℓ]`.
#[derive(Debug, Clone, Serialize)]
pub struct EmTrace {
    pub targets: Vec<EmTarget>,
    pub iterates: Vec<Vec<f64>>,
    pub logliks: Vec<f64>,
    pub converged: bool,
    pub oscillation_detected: bool,
}

fn extract_params(model: &ModelConfig, targets: &[EmTarget]) -> Vec<f64> {
    targets
        .iter()
        .map(|t| match t {
            EmTarget::Q => match model.length_prior {
                LengthPrior::Geometric { q } => q,
                LengthPrior::NegativeBinomial { q, .. } => q,
            },
            EmTarget::Tau => match model.observation {
                ObservationFamily::LaplaceMedian { tau, .. } => tau,
                _ => f64::NAN,
            },
            EmTarget::Sigma => match model.observation {
                ObservationFamily::LaplaceMedian { sigma, .. } => sigma,
                ObservationFamily::GaussianMeanKnownVar { sigma, .. } => sigma,
                ObservationFamily::GaussianVarKnownMean { mu, .. } => mu,
            },
        })
        .collect()
}

fn validate_targets(model: &ModelConfig, targets: &[EmTarget]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::InvalidParameter("no EM targets selected".into()));
    }
    for t in targets {
        if *t == EmTarget::Tau && !matches!(model.observation, ObservationFamily::LaplaceMedian { .. })
        {
            return Err(Error::InvalidParameter(
                "tau target requires the Laplace kernel".into(),
            ));
        }
    }
    Ok(())
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter()
        .zip(b)
        .all(|(&x, &y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1e-300))
}

/// Runs EM: filter → backward → marginals → M-steps, iterated until the
/// parameter vector converges. If the iterate revisits (within `tol`) one of
/// the previous `osc_window` parameter vectors without converging, the run
/// stops with the oscillation flag set and returns the best-loglikelihood
/// iterate. Returns the trace and the model at the returned iterate.
pub fn em_run(
    data: &TimeSeries,
    model: &ModelConfig,
    targets: &[EmTarget],
    config: &EmConfig,
) -> Result<(EmTrace, ModelConfig)> {
    validate_targets(model, targets)?;
    let mut current = model.clone();
    let mut trace = EmTrace {
        targets: targets.to_vec(),
        iterates: vec![extract_params(&current, targets)],
        logliks: Vec::new(),
        converged: false,
        oscillation_detected: false,
    };
    let mut models = vec![current.clone()];

    for iter in 0..config.max_iter {
        let fwd = filter_auto(data, &current)
            .map_err(|e| Error::Numeric(format!("iterate {iter}: {e}")))?;
        trace.logliks.push(log_marginal_likelihood(&fwd));
        let bt = backward_weights(&fwd, &fwd.hazard)?;
        let qtilde = changepoint_marginals(&bt);

        let mut next = current.clone();
        for t in targets {
            match t {
                EmTarget::Q => match next.length_prior {
                    LengthPrior::Geometric { ref mut q } => *q = em_step_geometric(&qtilde),
                    LengthPrior::NegativeBinomial { ref mut q, r } => {
                        *q = em_step_negbin(&bt, &qtilde, r, *q)?;
                    }
                },
                EmTarget::Tau => {
                    if let ObservationFamily::LaplaceMedian { ref mut tau, .. } = next.observation {
                        let step = em_step_tau(&bt, &qtilde, data, &current.observation)?;
                        if let Some(t_new) = step.tau {
                            *tau = t_new;
                        }
                    }
                }
                EmTarget::Sigma => match next.observation {
                    ObservationFamily::LaplaceMedian { ref mut sigma, .. } => {
                        *sigma = em_step_sigma(&bt, &qtilde, data, &current.observation)?.sigma;
                    }
                    ObservationFamily::GaussianMeanKnownVar { ref mut sigma, .. } => {
                        *sigma =
                            em_step_gaussian_sigma(&bt, &qtilde, data, &current.observation)?.sigma;
                    }
                    ObservationFamily::GaussianVarKnownMean { ref mut mu, .. } => {
                        *mu = em_step_gaussian_mu(&bt, &qtilde, data, &current.observation)?.mu;
                    }
                },
            }
        }
        let params = extract_params(&next, targets);
        let prev = trace.iterates.last().expect("nonempty");
        if close(&params, prev, config.tol) {
            trace.iterates.push(params);
            models.push(next);
            trace.converged = true;
            // Loglikelihood at the final iterate for a complete trace.
            let fwd = filter_auto(data, models.last().expect("nonempty"))?;
            trace.logliks.push(log_marginal_likelihood(&fwd));
            break;
        }
        let window_lo = trace.iterates.len().saturating_sub(config.osc_window);
        let oscillating = trace.iterates[window_lo..trace.iterates.len() - 1]
            .iter()
            .any(|old| close(&params, old, config.tol));
        trace.iterates.push(params);
        models.push(next.clone());
        if oscillating {
            trace.oscillation_detected = true;
            let fwd = filter_auto(data, &next)?;
            trace.logliks.push(log_marginal_likelihood(&fwd));
            break;
        }
        current = next;
    }
    if trace.logliks.len() < trace.iterates.len() {
        // max_iter exhausted without the trailing evaluation.
        let fwd = filter_auto(data, models.last().expect("nonempty"))?;
        trace.logliks.push(log_marginal_likelihood(&fwd));
    }
    // Return the best-loglikelihood iterate (equals the last on convergence
    // by monotonicity; meaningful under oscillation).
    let best = trace
        .logliks
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap_or(0);
    let final_model = models[best].clone();
    Ok((trace, final_model))
}
