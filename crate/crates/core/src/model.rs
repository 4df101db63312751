// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model definition: observed series, segment-length priors, hazard tables,
//! observation families, and the serializable model configuration.
//!
//! The length prior enters inference only through the survival ratios
//!
//! ```text
//! q_ji = P(C_i = j | C_{i-1} = j)
//! ```
//!
//! i.e. the probability that the segment started at `j` survives one more
//! step. For the stationary priors supported here this depends on `(j, i)`
//! only through the gap `d = i - j` (rows `j >= 1`) plus a separate rule for
//! the first row `j = 0`, whose segment start lies before the data window.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Observed data: one real value per timepoint, `1..=n` in model indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    values: Vec<f64>,
}

impl TimeSeries {
    /// Wraps a value sequence; requires at least one observation and all
    /// values finite.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidData("time series must be nonempty".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite value at position {} (1-based {})",
                pos,
                pos + 1
            )));
        }
        Ok(Self { values })
    }

    /// Number of observations `n`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects empty input
    }

    /// Observation `y_i` for `i` in `1..=n`.
    pub fn value(&self, i: usize) -> f64 {
        self.values[i - 1]
    }

    /// All observations, `values()[i-1] = y_i`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Prior on segment lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LengthPrior {
    /// Geometric with success probability `q`: memoryless, survival `1 - q`
    /// at every age.
    Geometric { q: f64 },
    /// Negative binomial: number of failures before the `r`-th success with
    /// success probability `q`. Requires `q <= r/(r+1)` so the residual
    /// first-segment rule stays a probability.
    NegativeBinomial { q: f64, r: u32 },
}

impl LengthPrior {
    /// Validates the parameter domain.
    pub fn validate(&self) -> Result<()> {
        match *self {
            LengthPrior::Geometric { q } => {
                if !(q > 0.0 && q < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "geometric q must lie in (0,1), got {q}"
                    )));
                }
            }
            LengthPrior::NegativeBinomial { q, r } => {
                if !(q > 0.0 && q < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "negative binomial q must lie in (0,1), got {q}"
                    )));
                }
                if r == 0 {
                    return Err(Error::InvalidParameter(
                        "negative binomial r must be positive".into(),
                    ));
                }
                let bound = r as f64 / (r as f64 + 1.0);
                if q > bound {
                    return Err(Error::InvalidParameter(format!(
                        "negative binomial requires q <= r/(r+1) = {bound}, got {q}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Success probability of the geometric residual-length rule for the first
/// segment under a NegBin(q, r) length prior: `q' = q / (r (1 - q))`.
///
/// The first segment started before the data window; its residual length is
/// approximated as geometric with this success probability. Requires
/// `q <= r/(r+1)` so that `q' <= 1` (equality accepted: the first segment
/// then ends at timepoint 1 almost surely).
pub fn residual_success_prob(q: f64, r: u32) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) || r == 0 {
        return Err(Error::InvalidParameter(format!(
            "residual_success_prob requires q in (0,1) and r >= 1, got q={q}, r={r}"
        )));
    }
    let bound = r as f64 / (r as f64 + 1.0);
    if q > bound {
        return Err(Error::InvalidParameter(format!(
            "residual rule requires q <= r/(r+1) = {bound}, got {q}"
        )));
    }
    Ok(q / (r as f64 * (1.0 - q)))
}

/// Survival ratios `q_ji` derived from a length prior, tabulated up to
/// horizon `n`.
///
/// `gap_survival(d)` covers rows `j >= 1` (the segment visibly started at
/// `j`, its current age is `d = i - j`); `first_row(i)` covers `j = 0`.
/// All values lie in `(0, 1]`.
#[derive(Debug, Clone)]
pub struct HazardTable {
    /// `gap[d-1] = q_ji` for `d = i - j`, `d = 1..=n`.
    gap: Vec<f64>,
    /// First-row survival `q_0i`; constant in `i` for the supported priors.
    first: f64,
    n: usize,
}

impl HazardTable {
    /// Survival probability for a segment of visible age `d >= 1`.
    pub fn gap_survival(&self, d: usize) -> f64 {
        self.gap[d - 1]
    }

    /// Survival probability `q_0i` of the first row at timepoint `i`.
    pub fn first_row(&self, _i: usize) -> f64 {
        self.first
    }

    /// Survival factor `q_{j,i}` addressed by particle coordinates.
    pub fn survival(&self, j: usize, i: usize) -> f64 {
        if j == 0 {
            self.first_row(i)
        } else {
            self.gap_survival(i - j)
        }
    }

    /// Horizon the table was built for.
    pub fn n(&self) -> usize {
        self.n
    }
}

/// Builds the hazard table for `prior` up to horizon `n`.
///
/// NegBin tail sums `S(l) = sum_{m >= l} NB(m; q, r)` are accumulated
/// backward in log domain, so the ratios `S(d)/S(d-1)` stay accurate deep in
/// the tail where `1 - CDF` would cancel.
pub fn build_hazard(prior: &LengthPrior, n: usize) -> Result<HazardTable> {
    prior.validate()?;
    if n == 0 {
        return Err(Error::InvalidParameter("horizon n must be >= 1".into()));
    }
    match *prior {
        LengthPrior::Geometric { q } => Ok(HazardTable {
            gap: vec![1.0 - q; n],
            first: 1.0 - q,
            n,
        }),
        LengthPrior::NegativeBinomial { q, r } => {
            let qp = residual_success_prob(q, r)?;
            let log_s = negbin_log_tails(q, r, n)?;
            let gap = (1..=n)
                .map(|d| (log_s[d] - log_s[d - 1]).exp().min(1.0))
                .collect();
            Ok(HazardTable {
                gap,
                first: 1.0 - qp,
                n,
            })
        }
    }
}

/// Log pmf of NB(m; q, r): number of failures `m` before the `r`-th success.
pub(crate) fn negbin_log_pmf(m: usize, q: f64, r: u32) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let m = m as f64;
    let r = r as f64;
    ln_gamma(r + m) - ln_gamma(m + 1.0) - ln_gamma(r) + r * q.ln() + m * (1.0 - q).ln()
}

/// Log tail sums `ln S(l)`, `l = 0..=n`, with `S(l) = sum_{m >= l} NB(m)`.
fn negbin_log_tails(q: f64, r: u32, n: usize) -> Result<Vec<f64>> {
    // Tail mass past the horizon, summed forward from m = n until the
    // increments stop mattering at f64 resolution.
    let anchor = negbin_log_pmf(n, q, r);
    let mut scaled = 0.0; // sum of exp(log_pmf(m) - anchor) for m >= n
    let mut log_term = 0.0f64;
    let mut m = n;
    loop {
        scaled += log_term.exp();
        // pmf ratio NB(m+1)/NB(m) = (r + m)(1 - q)/(m + 1)
        log_term += ((r as f64 + m as f64) / (m as f64 + 1.0)).ln() + (1.0 - q).ln();
        m += 1;
        if log_term.exp() < scaled * 1e-18 || m > n + 10_000_000 {
            break;
        }
    }
    let mut log_s = vec![0.0; n + 1];
    log_s[n] = anchor + scaled.ln();
    for l in (0..n).rev() {
        // S(l) = S(l+1) + NB(l)
        let a = log_s[l + 1];
        let b = negbin_log_pmf(l, q, r);
        let hi = a.max(b);
        log_s[l] = hi + ((a - hi).exp() + (b - hi).exp()).ln();
    }
    // S(0) = 1 exactly; pin it so ratios near the head are exact.
    log_s[0] = 0.0;
    Ok(log_s)
}

/// Observation family: the per-segment likelihood plus its conjugate height
/// prior. Scale parameters must be strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params")]
pub enum ObservationFamily {
    /// `y | x ~ N(x, sigma^2)` with height prior `x ~ N(mu0, tau0^2)`.
    GaussianMeanKnownVar { sigma: f64, mu0: f64, tau0: f64 },
    /// `y | x ~ N(mu, x)` (x the variance) with `x ~ InvGamma(alpha, beta)`.
    GaussianVarKnownMean { mu: f64, alpha: f64, beta: f64 },
    /// `y | x ~ Laplace(x, sigma)` with height prior `x ~ Laplace(mu, tau)`.
    LaplaceMedian { mu: f64, tau: f64, sigma: f64 },
}

impl ObservationFamily {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, v: f64| {
            Err(Error::InvalidParameter(format!(
                "{name} must be strictly positive and finite, got {v}"
            )))
        };
        match *self {
            ObservationFamily::GaussianMeanKnownVar { sigma, mu0, tau0 } => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return bad("sigma", sigma);
                }
                if !(tau0 > 0.0 && tau0.is_finite()) {
                    return bad("tau0", tau0);
                }
                if !mu0.is_finite() {
                    return Err(Error::InvalidParameter("mu0 must be finite".into()));
                }
            }
            ObservationFamily::GaussianVarKnownMean { mu, alpha, beta } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return bad("alpha", alpha);
                }
                if !(beta > 0.0 && beta.is_finite()) {
                    return bad("beta", beta);
                }
                if !mu.is_finite() {
                    return Err(Error::InvalidParameter("mu must be finite".into()));
                }
            }
            ObservationFamily::LaplaceMedian { mu, tau, sigma } => {
                if !(tau > 0.0 && tau.is_finite()) {
                    return bad("tau", tau);
                }
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return bad("sigma", sigma);
                }
                if !mu.is_finite() {
                    return Err(Error::InvalidParameter("mu must be finite".into()));
                }
            }
        }
        Ok(())
    }
}

/// On-the-fly pruning thresholds: particles younger than `T` are always
/// retained; older ones survive only if their unnormalized mass is at least
/// `Tprime` times the running normalizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "Tprime")]
    pub t_prime: f64,
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t < 1 {
            return Err(Error::InvalidParameter("prune.T must be >= 1".into()));
        }
        if !(self.t_prime >= 0.0 && self.t_prime.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "prune.Tprime must be finite and >= 0, got {}",
                self.t_prime
            )));
        }
        Ok(())
    }
}

/// Full model configuration; serializable to/from the `model.json` schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub length_prior: LengthPrior,
    pub observation: ObservationFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.length_prior.validate()?;
        self.observation.validate()?;
        if let Some(p) = &self.prune {
            p.validate()?;
        }
        Ok(())
    }

    /// Parses a `model.json` document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
