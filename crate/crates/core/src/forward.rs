// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward filtering: run-length posteriors `c_ji = P(C_i = j | y_1..y_i)`.
//!
//! One filter step from `i-1` to `i` (with `c_00 = 1`):
//!
//! ```text
//! d_ji = c_{j,i-1} q_ji r_ji          for existing j < i
//! d_ii = (1 - sum_j q_ji c_{j,i-1}) r_ii
//! Z_i  = sum_j d_ji + d_ii
//! c_ji = d_ji / Z_i
//! ```
//!
//! `q_ji` is the hazard survival, `r_ji` the kernel's one-step predictive.
//! `sum_i ln Z_i` is the marginal loglikelihood of the data.
//!
//! The pruned variant evaluates particles in ascending `j`; a particle is
//! retained iff `i - j < T` (minimal retention age) or `d_ji >= Z_i * T'`
//! where `Z_i` is the running sum over particles retained so far. Dropped `j`
//! are never revisited, and the survival mass `sum q c` is accumulated over
//! retained particles only, exactly matching the on-the-fly pruning scheme.
//! Because the threshold uses the partial sum, results depend on the `j`
//! iteration order; ascending `j` is fixed and part of the contract.
//!
//! Predictive evaluations within a step are independent across particles and
//! run data-parallel when the `parallel` feature is enabled; the pruning
//! decisions themselves remain a sequential ascending-`j` pass, so parallel
//! and sequential runs produce identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::kernel::KernelState;
use crate::model::{build_hazard, HazardTable, ModelConfig, TimeSeries};
use crate::{Error, Result};

/// Sparse upper-triangular table of per-timepoint particle weights, indexable
/// by column (`j` for fixed `i`) and, via [`ParticleGrid::rows`], by row.
#[derive(Debug, Clone)]
pub struct ParticleGrid {
    /// `cols[i-1]`: live `(j, c_ji)` pairs, ascending `j`.
    cols: Vec<Vec<(usize, f64)>>,
    /// `log_z[i-1] = ln Z_i`.
    log_z: Vec<f64>,
}

impl ParticleGrid {
    /// Number of timepoints `n`.
    pub fn n(&self) -> usize {
        self.cols.len()
    }

    /// Live `(j, c_ji)` pairs for timepoint `i` (ascending `j`).
    pub fn col(&self, i: usize) -> &[(usize, f64)] {
        &self.cols[i - 1]
    }

    /// Weight `c_ji`, or `None` if the particle was pruned.
    pub fn weight(&self, j: usize, i: usize) -> Option<f64> {
        let col = &self.cols[i - 1];
        col.binary_search_by_key(&j, |&(jj, _)| jj)
            .ok()
            .map(|k| col[k].1)
    }

    /// Per-step log normalizers `ln Z_i` (index `i-1`).
    pub fn log_z(&self) -> &[f64] {
        &self.log_z
    }

    /// Number of live particles at timepoint `i`.
    pub fn particle_count(&self, i: usize) -> usize {
        self.cols[i - 1].len()
    }

    /// Total number of live particles across all timepoints.
    pub fn total_particles(&self) -> usize {
        self.cols.iter().map(Vec::len).sum()
    }

    /// Row view: `rows()[j]` lists `(i, c_ji)` ascending in `i`, for
    /// `j = 0..=n`. Built in one pass; used by the pointwise and EM sweeps.
    pub fn rows(&self) -> Vec<Vec<(usize, f64)>> {
        let n = self.n();
        let mut rows = vec![Vec::new(); n + 1];
        for (idx, col) in self.cols.iter().enumerate() {
            let i = idx + 1;
            for &(j, w) in col {
                rows[j].push((i, w));
            }
        }
        rows
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub grid: ParticleGrid,
    /// Kernel states of the particles still live at `i = n`, ascending `j`.
    pub final_states: Vec<(usize, KernelState)>,
    /// Number of steps where `1 - sum q c` went negative by rounding and was
    /// clamped to zero.
    pub clamped_steps: usize,
    /// The model the pass was run with (pruning field reflects what was
    /// actually applied).
    pub model: ModelConfig,
    /// Hazard table used by the pass, reusable downstream.
    pub hazard: HazardTable,
}

impl ForwardResult {
    pub fn n(&self) -> usize {
        self.grid.n()
    }
}

/// Marginal loglikelihood of the observations: `sum_i ln Z_i`.
pub fn log_marginal_likelihood(result: &ForwardResult) -> f64 {
    result.grid.log_z().iter().sum()
}

/// Unpruned forward filter (every particle retained).
pub fn filter(data: &TimeSeries, model: &ModelConfig) -> Result<ForwardResult> {
    run_filter(data, model, None, cfg_parallel())
}

/// Forward filter with on-the-fly pruning.
pub fn filter_pruned(
    data: &TimeSeries,
    model: &ModelConfig,
    t: usize,
    t_prime: f64,
) -> Result<ForwardResult> {
    if t < 1 {
        return Err(Error::InvalidParameter("pruning requires T >= 1".into()));
    }
    if !(t_prime >= 0.0 && t_prime.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "pruning requires finite T' >= 0, got {t_prime}"
        )));
    }
    run_filter(data, model, Some((t, t_prime)), cfg_parallel())
}

/// Runs the filter honoring `model.prune` if present.
pub fn filter_auto(data: &TimeSeries, model: &ModelConfig) -> Result<ForwardResult> {
    match model.prune {
        Some(p) => filter_pruned(data, model, p.t, p.t_prime),
        None => filter(data, model),
    }
}

/// Sequential forward filter, compiled regardless of the `parallel` feature;
/// used as the baseline in the benchmark suite.
pub fn filter_seq(data: &TimeSeries, model: &ModelConfig) -> Result<ForwardResult> {
    run_filter(data, model, None, false)
}

/// Sequential pruned filter (benchmark baseline).
pub fn filter_pruned_seq(
    data: &TimeSeries,
    model: &ModelConfig,
    t: usize,
    t_prime: f64,
) -> Result<ForwardResult> {
    run_filter(data, model, Some((t, t_prime)), false)
}

fn cfg_parallel() -> bool {
    cfg!(feature = "parallel")
}

struct Particle {
    j: usize,
    c: f64,
    state: KernelState,
}

fn run_filter(
    data: &TimeSeries,
    model: &ModelConfig,
    prune: Option<(usize, f64)>,
    parallel: bool,
) -> Result<ForwardResult> {
    model.validate()?;
    let n = data.len();
    let hazard = build_hazard(&model.length_prior, n)?;
    let family = model.observation;

    let mut cols: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let mut log_z = Vec::with_capacity(n);
    let mut clamped = 0usize;

    // Live particles from the previous step, ascending j. Start: c_00 = 1.
    let mut live: Vec<Particle> = vec![Particle {
        j: 0,
        c: 1.0,
        state: family.fresh_state(),
    }];

    for i in 1..=n {
        let y = data.value(i);

        // Predictive pass: advance every surviving kernel state by y_i.
        // Independent across particles.
        let log_r: Vec<f64> = compute_predictives(&family, &mut live, y, parallel)
            .map_err(|e| Error::Numeric(format!("kernel failure at timepoint i={i}: {e}")))?;

        // Fresh particle j = i.
        let mut fresh = family.fresh_state();
        let log_r_new = family
            .update_state(&mut fresh, y)
            .map_err(|e| Error::Numeric(format!("kernel failure at (j,i)=({i},{i}): {e}")))?;

        // Scale all predictives by their maximum so the linear-domain masses
        // stay well ranged; the scaling cancels in c_ji and is added back to
        // ln Z_i. The pruning threshold is scale invariant.
        let scale = log_r
            .iter()
            .copied()
            .fold(log_r_new, f64::max);
        if !scale.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite predictive at timepoint i={i}"
            )));
        }

        // Sequential descending-j pruning pass: young particles (age < T,
        // always retained) are folded into the running normalizer first, so
        // by the time stale particles are tested the partial sum already
        // carries the dominant recent mass and the relative-contribution
        // threshold has teeth.
        let mut z = 0.0f64; // running (scaled) normalizer
        let mut survival_mass = 0.0f64; // sum of q_ji c_{j,i-1} over retained
        let mut retained: Vec<Particle> = Vec::with_capacity(live.len() + 1);
        let mut masses: Vec<f64> = Vec::with_capacity(live.len() + 1);
        for (p, &lr) in live.drain(..).rev().zip(log_r.iter().rev()) {
            let q = hazard.survival(p.j, i);
            let d = p.c * q * (lr - scale).exp();
            // The survived prior mass counts whether or not the particle is
            // retained: a dropped particle's mass must vanish under
            // renormalization, not be rerouted into the fresh changepoint
            // particle. (A particle that crashes at a changepoint still held
            // nearly all of the previous column's mass; folding it into the
            // residual would inflate Z_i by orders of magnitude.)
            survival_mass += q * p.c;
            let keep = match prune {
                None => true,
                Some((t, t_prime)) => i - p.j < t || d >= z * t_prime,
            };
            if keep {
                z += d;
                masses.push(d);
                retained.push(p);
            }
            // Dropped particles' states are freed here.
        }
        retained.reverse();
        masses.reverse();
        let mut residual = 1.0 - survival_mass;
        if residual < 0.0 {
            residual = 0.0;
            clamped += 1;
        }
        let d_new = residual * (log_r_new - scale).exp();
        z += d_new;
        masses.push(d_new);
        retained.push(Particle { j: i, c: 0.0, state: fresh });

        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::Numeric(format!(
                "normalizer Z_{i} = {z} is not positive and finite"
            )));
        }
        log_z.push(scale + z.ln());

        let mut col = Vec::with_capacity(retained.len());
        for (p, d) in retained.iter_mut().zip(masses.iter()) {
            p.c = d / z;
            col.push((p.j, p.c));
        }
        cols.push(col);
        live = retained;
    }

    let final_states = live
        .into_iter()
        .map(|p| (p.j, p.state))
        .collect();

    let mut model_echo = model.clone();
    model_echo.prune = prune.map(|(t, t_prime)| crate::model::PruneConfig { t, t_prime });

    Ok(ForwardResult {
        grid: ParticleGrid { cols, log_z },
        final_states,
        clamped_steps: clamped,
        model: model_echo,
        hazard,
    })
}

fn compute_predictives(
    family: &crate::model::ObservationFamily,
    live: &mut [Particle],
    y: f64,
    parallel: bool,
) -> Result<Vec<f64>> {
    #[cfg(feature = "parallel")]
    {
        // Parallelize only when the per-particle work can amortize the
        // scheduling overhead (Laplace kernels on wide columns).
        let heavy = matches!(
            family,
            crate::model::ObservationFamily::LaplaceMedian { .. }
        );
        if parallel && heavy && live.len() >= 64 {
            return live
                .par_iter_mut()
                .map(|p| family.update_state(&mut p.state, y))
                .collect();
        }
    }
    let _ = parallel;
    live.iter_mut()
        .map(|p| family.update_state(&mut p.state, y))
        .collect()
}
