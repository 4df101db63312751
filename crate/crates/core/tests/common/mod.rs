// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared test oracles: exhaustive segmentation enumeration, adaptive
//! quadrature for Laplace-type integrals, and a golden-section maximizer.
//! These are written independently of the library's numerical paths so they
//! can arbitrate its results.

#![allow(dead_code)]

use cpx_core::model::{build_hazard, HazardTable, ModelConfig, ObservationFamily, TimeSeries};

// ---------------------------------------------------------------------------
// Generic numeric helpers
// ---------------------------------------------------------------------------

pub fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + simpson_rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
}

/// Adaptive Simpson quadrature of `f` on `[a, b]`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(&f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Golden-section maximizer of a unimodal function on `[a, b]`.
pub fn golden_section_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

// ---------------------------------------------------------------------------
// Laplace-type quadrature
// ---------------------------------------------------------------------------

/// Energy `E(x) = Σ w_ℓ |x − z_ℓ|` of a breakpoint set.
pub fn energy(points: &[(f64, f64)], x: f64) -> f64 {
    points.iter().map(|&(z, w)| w * (x - z).abs()).sum()
}

/// `∫ g(x) e^{−(E(x) − shift)} dx` over the whole line by piecewise adaptive
/// Simpson, together with the shift used (`shift` = minimum breakpoint
/// energy, so the integrand is O(1)). The true log-integral of
/// `g·e^{−E}` is `ln(result) − shift` for positive `g`.
pub fn laplace_quad<G: Fn(f64) -> f64>(points: &[(f64, f64)], g: G) -> (f64, f64) {
    assert!(!points.is_empty());
    let mut zs: Vec<f64> = points.iter().map(|&(z, _)| z).collect();
    zs.sort_by(f64::total_cmp);
    zs.dedup();
    let shift = zs
        .iter()
        .map(|&z| energy(points, z))
        .fold(f64::INFINITY, f64::min);
    let total_w: f64 = points.iter().map(|&(_, w)| w).sum();
    assert!(total_w > 0.0);
    let h = |x: f64| g(x) * (-(energy(points, x) - shift)).exp();
    // Exponential tails decay at rate `total_w`; 60 decay lengths suffice
    // far below 1e-12 relative truncation.
    let ext = 60.0 / total_w;
    let mut nodes = vec![zs[0] - ext];
    nodes.extend(zs.iter().copied());
    nodes.push(zs[zs.len() - 1] + ext);
    let mut total = 0.0;
    for w in nodes.windows(2) {
        // Relative panel tolerance from a coarse magnitude scan; kept tight
        // because signed integrands can cancel across panels.
        let width = w[1] - w[0];
        let peak = (0..=8)
            .map(|k| h(w[0] + width * k as f64 / 8.0).abs())
            .fold(0.0f64, f64::max);
        total += adaptive_simpson(&h, w[0], w[1], 1e-14 * (1.0 + peak * width));
    }
    (total, shift)
}

// ---------------------------------------------------------------------------
// Closed-form / quadrature segment marginal likelihoods
// ---------------------------------------------------------------------------

/// `ln ∫ Π_ℓ f(y_ℓ | x) 𝒥(dx)` for one segment, computed independently of
/// the kernel recursions.
pub fn segment_log_marglik(family: &ObservationFamily, ys: &[f64]) -> f64 {
    let k = ys.len() as f64;
    match *family {
        ObservationFamily::GaussianMeanKnownVar { sigma, mu0, tau0 } => {
            // y ~ N(mu0·1, σ²I + τ0²J); Sherman–Morrison for the quadratic
            // form, matrix determinant lemma for the determinant.
            let s2 = sigma * sigma;
            let t2 = tau0 * tau0;
            let r: Vec<f64> = ys.iter().map(|y| y - mu0).collect();
            let sr: f64 = r.iter().sum();
            let sr2: f64 = r.iter().map(|v| v * v).sum();
            let logdet = (k - 1.0) * s2.ln() + (s2 + k * t2).ln();
            let quad = (sr2 - t2 * sr * sr / (s2 + k * t2)) / s2;
            -0.5 * (k * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
        }
        ObservationFamily::GaussianVarKnownMean { mu, alpha, beta } => {
            let s: f64 = ys.iter().map(|y| (y - mu) * (y - mu)).sum();
            alpha * beta.ln() + ln_gamma(alpha + 0.5 * k)
                - ln_gamma(alpha)
                - 0.5 * k * (2.0 * std::f64::consts::PI).ln()
                - (alpha + 0.5 * k) * (beta + 0.5 * s).ln()
        }
        ObservationFamily::LaplaceMedian { mu, tau, sigma } => {
            let mut points = vec![(mu, 1.0 / tau)];
            points.extend(ys.iter().map(|&y| (y, 1.0 / sigma)));
            let (integral, shift) = laplace_quad(&points, |_| 1.0);
            integral.ln() - shift - k * (2.0 * sigma).ln() - (2.0 * tau).ln()
        }
    }
}

/// Lanczos log-gamma (independent of library code paths).
pub fn ln_gamma(x: f64) -> f64 {
    // Coefficients for g = 7, n = 9.
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut a = C[0];
        let t = x + G + 0.5;
        for (i, &c) in C.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}

// ---------------------------------------------------------------------------
// Exhaustive enumeration oracle
// ---------------------------------------------------------------------------

/// Posterior over all `2^n` changepoint configurations, built from the
/// hazard chain prior and independent segment marginal likelihoods.
pub struct EnumOracle {
    pub n: usize,
    /// `configs[k]` ↔ bitmask `k`: τ ∈ config iff bit τ−1 set.
    pub configs: Vec<Vec<usize>>,
    /// Normalized log posterior per configuration.
    pub log_post: Vec<f64>,
    /// `ln P(y_1..y_n)`.
    pub log_marglik: f64,
    hazard: HazardTable,
    /// Memoized `ln P(y_s..y_e)` per segment, `seg_ll[s][e]`, 1-based.
    seg_ll: Vec<Vec<f64>>,
}

/// Timepoints encoded by a configuration bitmask (bit τ−1 set ⇔ τ ∈ config).
pub fn taus_of_mask(mask: u32, n: usize) -> Vec<usize> {
    (1..=n).filter(|&t| mask >> (t - 1) & 1 == 1).collect()
}

fn segments_of(taus: &[usize], upto: usize) -> Vec<(usize, usize, usize)> {
    // (label j, start, end) with j = 0 for the head segment.
    let mut segs = Vec::new();
    let mut start = 1usize;
    let mut label = 0usize;
    for &t in taus {
        if t > upto {
            break;
        }
        if t > start {
            segs.push((label, start, t - 1));
        }
        start = t;
        label = t;
    }
    segs.push((label, start, upto));
    segs
}

/// Prior log-probability of the change pattern over timepoints `1..=upto`.
fn prefix_prior_log(hazard: &HazardTable, taus: &[usize], upto: usize) -> f64 {
    let mut j = 0usize;
    let mut lp = 0.0;
    for t in 1..=upto {
        let s = hazard.survival(j, t);
        if taus.binary_search(&t).is_ok() {
            lp += (1.0 - s).ln();
            j = t;
        } else {
            lp += s.ln();
        }
    }
    lp
}

impl EnumOracle {
    pub fn new(data: &TimeSeries, model: &ModelConfig) -> Self {
        let n = data.len();
        assert!(n <= 20, "enumeration oracle limited to small n");
        let hazard = build_hazard(&model.length_prior, n).expect("valid prior");
        let family = model.observation;
        let ys = data.values().to_vec();
        // Memoize segment marginal likelihoods once; all 2^n configurations
        // reuse them.
        let mut seg_ll = vec![vec![f64::NAN; n + 1]; n + 1];
        for s in 1..=n {
            for e in s..=n {
                seg_ll[s][e] = segment_log_marglik(&family, &ys[s - 1..e]);
            }
        }
        let mut configs = Vec::with_capacity(1 << n);
        let mut log_joint = Vec::with_capacity(1 << n);
        for mask in 0..(1u32 << n) {
            let taus = taus_of_mask(mask, n);
            let mut lp = prefix_prior_log(&hazard, &taus, n);
            for (_, s, e) in segments_of(&taus, n) {
                lp += seg_ll[s][e];
            }
            configs.push(taus);
            log_joint.push(lp);
        }
        let log_marglik = logsumexp(&log_joint);
        let log_post = log_joint.iter().map(|v| v - log_marglik).collect();
        Self {
            n,
            configs,
            log_post,
            log_marglik,
            hazard,
            seg_ll,
        }
    }

    fn prefix_weights(&self, i: usize, reweight: bool) -> Vec<(usize, f64)> {
        let mut log_terms: Vec<Vec<f64>> = vec![Vec::new(); i + 1];
        for mask in 0..(1u32 << i) {
            let taus = taus_of_mask(mask, i);
            let j = taus.last().copied().unwrap_or(0);
            let mut lp = prefix_prior_log(&self.hazard, &taus, i);
            if reweight {
                lp += (1.0 - self.hazard.survival(j, i + 1)).ln();
            }
            for (_, s, e) in segments_of(&taus, i) {
                lp += self.seg_ll[s][e];
            }
            log_terms[j].push(lp);
        }
        let per_j: Vec<f64> = log_terms.iter().map(|t| logsumexp(t)).collect();
        let norm = logsumexp(&per_j);
        (0..=i)
            .filter(|&j| per_j[j].is_finite())
            .map(|j| (j, (per_j[j] - norm).exp()))
            .collect()
    }

    /// Forward weights `c_ji = P(C_i = j | y_1..y_i)` by prefix enumeration.
    pub fn forward_weights(&self, i: usize) -> Vec<(usize, f64)> {
        self.prefix_weights(i, false)
    }

    /// Retrospective weights `c̃_ji = P(C_i = j | C_{i+1} = i+1, y_1..y_i)`
    /// (for `i = n`: the forward weights).
    pub fn backward_weights(&self, i: usize) -> Vec<(usize, f64)> {
        self.prefix_weights(i, i < self.n)
    }

    /// `q̃_i = P(i ∈ C | y)`.
    pub fn qtilde(&self) -> Vec<f64> {
        let mut q = vec![0.0f64; self.n];
        for (taus, lp) in self.configs.iter().zip(&self.log_post) {
            let p = lp.exp();
            for &t in taus {
                q[t - 1] += p;
            }
        }
        q
    }

    /// `−Σ p ln p` over configurations.
    pub fn entropy(&self) -> f64 {
        -self
            .log_post
            .iter()
            .map(|&lp| {
                let p = lp.exp();
                if p > 0.0 {
                    p * lp
                } else {
                    0.0
                }
            })
            .sum::<f64>()
    }

    /// Largest configuration log posterior.
    pub fn map_log_posterior(&self) -> f64 {
        self.log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Exact config probabilities indexed by bitmask.
    pub fn probabilities(&self) -> Vec<f64> {
        self.log_post.iter().map(|lp| lp.exp()).collect()
    }
}

/// Exact coverage of a region (timepoint set, bitmask) under enumerated
/// configuration probabilities: total mass of configurations contained in it.
pub fn exact_coverage(probs: &[f64], region_mask: u32) -> f64 {
    probs
        .iter()
        .enumerate()
        .filter(|&(cfg, _)| cfg as u32 & !region_mask == 0)
        .map(|(_, &p)| p)
        .sum()
}

/// All minimum-cardinality regions with exact coverage ≥ 1 − α, as sorted
/// timepoint lists.
pub fn exact_sbp_optima(probs: &[f64], n: usize, alpha: f64) -> Vec<Vec<usize>> {
    let mut best = usize::MAX;
    let mut optima: Vec<Vec<usize>> = Vec::new();
    for mask in 0..(1u32 << n) {
        let size = mask.count_ones() as usize;
        if size > best {
            continue;
        }
        if exact_coverage(probs, mask) >= 1.0 - alpha {
            if size < best {
                best = size;
                optima.clear();
            }
            optima.push(taus_of_mask(mask, n));
        }
    }
    optima
}
