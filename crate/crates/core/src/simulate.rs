// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ground-truth data generation for piecewise-constant changepoint models.
//!
//! Fixed-count changepoint placement uses the sequential scheme
//!
//! ```text
//! at position i, given ℓ placed so far: place with probability (k−ℓ)/(n−i+1)
//! ```
//!
//! which is exactly uniform over all C(n, k) subsets of size `k`. Series are
//! generated by drawing a changepoint set, i.i.d. segment heights from a
//! height law, and observations from a noise law centered at the height.
//! By default generated changepoints avoid timepoint 1 (a changepoint at 1
//! only relabels the head segment); a flag re-admits it.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::TimeSeries;
use crate::posterior::ChangepointConfig;
use crate::{Error, Result};

/// Uniformly random size-`k` subset of `{1..n}`.
pub fn uniform_k_changepoints<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "need 0 < k ≤ n (k={k}, n={n})"
        )));
    }
    let mut out = Vec::with_capacity(k);
    let mut placed = 0usize;
    for i in 1..=n {
        if placed == k {
            break;
        }
        let p = (k - placed) as f64 / (n - i + 1) as f64;
        if rng.gen::<f64>() < p {
            out.push(i);
            placed += 1;
        }
    }
    Ok(out)
}

/// Sampling law for heights and noise.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum Law {
    Gaussian { mean: f64, sd: f64 },
    Laplace { median: f64, scale: f64 },
}

impl Law {
    pub fn validate(&self) -> Result<()> {
        let spread = match self {
            Law::Gaussian { sd, .. } => *sd,
            Law::Laplace { scale, .. } => *scale,
        };
        if !(spread >= 0.0) || !spread.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "law spread must be finite and ≥ 0, got {spread}"
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Law::Gaussian { mean, sd } => {
                if sd == 0.0 {
                    mean
                } else {
                    Normal::new(mean, sd).expect("validated").sample(rng)
                }
            }
            Law::Laplace { median, scale } => {
                // Inverse CDF: u ∈ (−1/2, 1/2).
                let u: f64 = rng.gen::<f64>() - 0.5;
                median - scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        }
    }
}

/// How changepoint locations are drawn.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Placement {
    /// Exactly `k` changepoints, uniform over admissible positions.
    FixedK { k: usize },
    /// Independent changepoint at each admissible timepoint with
    /// probability `q`.
    Geometric { q: f64 },
    /// Fixed locations.
    Explicit { taus: Vec<usize> },
}

/// Simulation specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSpec {
    pub n: usize,
    pub placement: Placement,
    pub height_law: Law,
    pub noise_law: Law,
    /// Admit `τ = 1` (default false: generated changepoints lie in `{2..n}`).
    #[serde(default)]
    pub allow_tau_one: bool,
}

/// Generated series together with its ground truth.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub data: TimeSeries,
    pub truth: ChangepointConfig,
    /// Per-timepoint true heights (piecewise constant).
    pub heights: Vec<f64>,
}

/// Simulation design with `n = 4050`, 12 uniform changepoints, heights
/// Laplace(0, 10), unit-scale Laplace noise.
pub fn preset_emstudy() -> SimSpec {
    SimSpec {
        n: 4050,
        placement: Placement::FixedK { k: 12 },
        height_law: Law::Laplace {
            median: 0.0,
            scale: 10.0,
        },
        noise_law: Law::Laplace {
            median: 0.0,
            scale: 1.0,
        },
        allow_tau_one: false,
    }
}

/// Introductory Gaussian design: `n = 550`, per-timepoint changepoint
/// probability `3/550`, heights N(0, 25), standard normal noise.
pub fn preset_intro() -> SimSpec {
    SimSpec {
        n: 550,
        placement: Placement::Geometric { q: 3.0 / 550.0 },
        height_law: Law::Gaussian { mean: 0.0, sd: 5.0 },
        noise_law: Law::Gaussian { mean: 0.0, sd: 1.0 },
        allow_tau_one: false,
    }
}

/// Draws a piecewise-constant series with its true segmentation and heights.
pub fn gen_piecewise<R: Rng + ?Sized>(spec: &SimSpec, rng: &mut R) -> Result<SimOutput> {
    if spec.n == 0 {
        return Err(Error::InvalidParameter("need n ≥ 1".into()));
    }
    spec.height_law.validate()?;
    spec.noise_law.validate()?;
    let lo = if spec.allow_tau_one { 1 } else { 2 };
    let taus: Vec<usize> = match &spec.placement {
        Placement::FixedK { k } => {
            let slots = spec.n + 1 - lo;
            uniform_k_changepoints(slots, *k, rng)?
                .into_iter()
                .map(|t| t + lo - 1)
                .collect()
        }
        Placement::Geometric { q } => {
            if !(0.0..=1.0).contains(q) {
                return Err(Error::InvalidParameter(format!(
                    "changepoint probability {q} outside [0, 1]"
                )));
            }
            (lo..=spec.n).filter(|_| rng.gen::<f64>() < *q).collect()
        }
        Placement::Explicit { taus } => {
            if taus.iter().any(|&t| t < lo) {
                return Err(Error::InvalidParameter(format!(
                    "explicit changepoint below {lo}"
                )));
            }
            taus.clone()
        }
    };
    let truth = ChangepointConfig::new(taus, spec.n)?;
    let mut heights = vec![0.0f64; spec.n];
    let mut values = vec![0.0f64; spec.n];
    for (start, end) in truth.segments(spec.n) {
        let h = spec.height_law.sample(rng);
        for t in start..=end {
            heights[t - 1] = h;
            let noise = spec.noise_law.sample(rng);
            values[t - 1] = h
                + match spec.noise_law {
                    Law::Gaussian { mean, .. } => noise - mean,
                    Law::Laplace { median, .. } => noise - median,
                };
        }
    }
    Ok(SimOutput {
        data: TimeSeries::new(values)?,
        truth,
        heights,
    })
}
