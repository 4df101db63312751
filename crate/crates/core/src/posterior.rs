// SPDX-License-Identifier: MIT OR Apache-2.0

//! Backward inference over changepoint configurations.
//!
//! Everything here is built from the retrospective weights
//!
//! ```text
//! c̃_ji = P(C_i = j | C_{i+1} = i+1, y_1..y_i)     for i < n
//! c̃_jn = c_jn
//! ```
//!
//! obtained from the forward weights by one reweighting per column:
//! `c̃_ji ∝ c_ji (1 - q_{j,i+1})`. A changepoint configuration
//! `τ_1 < ... < τ_k` then has posterior probability
//!
//! ```text
//! c̃_{0,τ1-1} · prod_t c̃_{τ_t, τ_{t+1}-1} · c̃_{τ_k, n}      (c̃_00 = 1)
//! ```
//!
//! which factorization powers the MAP dynamic program, exact configuration
//! sampling, and the entropy recursion.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::forward::ForwardResult;
use crate::model::{HazardTable, ModelConfig, TimeSeries};
use crate::{Error, Result};

/// Retrospective weights with the same sparse column structure as the
/// forward grid.
#[derive(Debug, Clone)]
pub struct BackwardTable {
    /// `cols[i-1]`: live `(j, c̃_ji)` pairs, ascending `j`.
    cols: Vec<Vec<(usize, f64)>>,
}

impl BackwardTable {
    /// Number of timepoints `n`.
    pub fn n(&self) -> usize {
        self.cols.len()
    }

    /// Live `(j, c̃_ji)` pairs for timepoint `i`, ascending `j`.
    pub fn col(&self, i: usize) -> &[(usize, f64)] {
        &self.cols[i - 1]
    }

    /// Weight `c̃_ji`, or `None` if the particle was pruned. The convention
    /// `c̃_00 = 1` is handled by the consumers, not stored.
    pub fn weight(&self, j: usize, i: usize) -> Option<f64> {
        let col = &self.cols[i - 1];
        col.binary_search_by_key(&j, |&(jj, _)| jj)
            .ok()
            .map(|k| col[k].1)
    }

    /// Row view: `rows()[j]` lists `(i, c̃_ji)` ascending in `i`.
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

    /// Builds a table from raw columns (test and oracle support; columns must
    /// be ascending in `j` and normalized).
    pub fn from_columns(cols: Vec<Vec<(usize, f64)>>) -> Self {
        Self { cols }
    }
}

/// Computes the retrospective weights from a forward pass.
pub fn backward_weights(fwd: &ForwardResult, hazard: &HazardTable) -> Result<BackwardTable> {
    let n = fwd.n();
    let mut cols = Vec::with_capacity(n);
    for i in 1..=n {
        let src = fwd.grid.col(i);
        if i == n {
            cols.push(src.to_vec());
            continue;
        }
        let mut col: Vec<(usize, f64)> = src
            .iter()
            .map(|&(j, c)| (j, c * (1.0 - hazard.survival(j, i + 1))))
            .collect();
        let norm: f64 = col.iter().map(|&(_, w)| w).sum();
        if !(norm > 0.0) {
            return Err(Error::Numeric(format!(
                "backward normalizer vanished at timepoint {i}"
            )));
        }
        for entry in &mut col {
            entry.1 /= norm;
        }
        cols.push(col);
    }
    Ok(BackwardTable { cols })
}

/// A changepoint configuration: strictly increasing locations in `1..=n`
/// (`τ = 1` allowed; empty means no changepoints).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChangepointConfig {
    taus: Vec<usize>,
}

impl ChangepointConfig {
    pub fn new(taus: Vec<usize>, n: usize) -> Result<Self> {
        for w in taus.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidData(
                    "changepoints must be strictly increasing".into(),
                ));
            }
        }
        if let (Some(&first), Some(&last)) = (taus.first(), taus.last()) {
            if first < 1 || last > n {
                return Err(Error::InvalidData(format!(
                    "changepoints must lie in 1..={n}"
                )));
            }
        }
        Ok(Self { taus })
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// Segment boundaries `[start, end]` (inclusive, 1-based) induced on a
    /// series of length `n`. The leading segment starts at 1 whether or not
    /// `τ_1 = 1`.
    pub fn segments(&self, n: usize) -> Vec<(usize, usize)> {
        let mut segs = Vec::with_capacity(self.taus.len() + 1);
        let mut start = 1usize;
        for &t in &self.taus {
            if t > start {
                segs.push((start, t - 1));
            }
            start = t;
        }
        segs.push((start, n));
        segs
    }
}

/// Log-probability of a configuration, with a flag for references to
/// pruned-away particles (in which case the value is `-inf`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfigScore {
    pub log_likelihood: f64,
    /// True if some factor referenced a particle absent from the table.
    pub missing_particle: bool,
}

/// Log posterior probability of `cfg` under the configuration law.
pub fn config_log_likelihood(bt: &BackwardTable, cfg: &ChangepointConfig) -> ConfigScore {
    let n = bt.n();
    let mut log = 0.0f64;
    let mut missing = false;
    // Factor c̃_{j, e} for a segment [j, e]; j = 0 encodes the head segment.
    let mut factor = |j: usize, e: usize| {
        if j == 0 && e == 0 {
            return; // c̃_00 = 1
        }
        match bt.weight(j, e) {
            Some(w) if w > 0.0 => log += w.ln(),
            Some(_) => log = f64::NEG_INFINITY,
            None => {
                missing = true;
                log = f64::NEG_INFINITY;
            }
        }
    };
    if cfg.is_empty() {
        factor(0, n);
    } else {
        let taus = cfg.taus();
        factor(0, taus[0] - 1);
        for w in taus.windows(2) {
            factor(w[0], w[1] - 1);
        }
        factor(*taus.last().expect("nonempty"), n);
    }
    ConfigScore {
        log_likelihood: log,
        missing_particle: missing,
    }
}

/// MAP configuration via the Viterbi-style dynamic program on `-ln c̃`.
///
/// `G(i)` is the best log-probability over configurations of `1..=i` given a
/// changepoint at `i+1` (for `i = n`: over all configurations), with
/// `G(0) = 0`. Transition: a segment `[j, i]` contributes `ln c̃_ji` plus
/// `G(j-1)` for `j >= 1`, or stands alone for the `j = 0` head segment.
/// Ties (at 1e-12 relative) break toward fewer changepoints, then toward the
/// later segment start.
pub fn map_segmentation(bt: &BackwardTable) -> ChangepointConfig {
    let n = bt.n();
    // value[i], count[i], choice[i] for i = 0..=n; index 0 is the base case.
    let mut value = vec![f64::NEG_INFINITY; n + 1];
    let mut count = vec![usize::MAX; n + 1];
    let mut choice = vec![0usize; n + 1];
    value[0] = 0.0;
    count[0] = 0;
    for i in 1..=n {
        for &(j, w) in bt.col(i) {
            if w <= 0.0 {
                continue;
            }
            let (base, cps) = if j == 0 {
                (0.0, 0usize)
            } else {
                if !value[j - 1].is_finite() {
                    continue;
                }
                (value[j - 1], count[j - 1] + 1)
            };
            let cand = base + w.ln();
            let tol = 1e-12 * cand.abs().max(1.0);
            let better = if cand > value[i] + tol {
                true
            } else if (cand - value[i]).abs() <= tol {
                // Tie: fewer changepoints, then later segment start (columns
                // are ascending in j, so `<=` keeps the later j on count
                // ties).
                cps < count[i] || (cps == count[i] && j >= choice[i])
            } else {
                false
            };
            if better {
                value[i] = cand;
                count[i] = cps;
                choice[i] = j;
            }
        }
    }
    let mut taus = Vec::new();
    let mut i = n;
    while i > 0 {
        let j = choice[i];
        if j == 0 {
            break;
        }
        taus.push(j);
        i = j - 1;
    }
    taus.reverse();
    ChangepointConfig { taus }
}

/// Value of the MAP optimum, `max_cfg ln P(cfg | y)`.
pub fn map_log_likelihood(bt: &BackwardTable) -> f64 {
    let cfg = map_segmentation(bt);
    config_log_likelihood(bt, &cfg).log_likelihood
}

/// One exact draw from the configuration posterior.
///
/// Backward stepwise: at timepoint `i`, accumulate `c̃_ji` over existing
/// particles in descending `j` until the running sum reaches a uniform draw;
/// the chosen `j` is the segment start (a changepoint if `j >= 1`), and the
/// walk continues at `j - 1`.
pub fn sample_changepoints<R: Rng + ?Sized>(bt: &BackwardTable, rng: &mut R) -> ChangepointConfig {
    let mut taus = Vec::new();
    let mut i = bt.n();
    while i > 0 {
        let u: f64 = rng.gen();
        let col = bt.col(i);
        let mut s = 0.0;
        let mut picked = col[0].0; // fall back to the lowest j on rounding
        for &(j, w) in col.iter().rev() {
            s += w;
            if s >= u {
                picked = j;
                break;
            }
        }
        if picked == 0 {
            break;
        }
        taus.push(picked);
        i = picked - 1;
    }
    taus.reverse();
    ChangepointConfig { taus }
}

/// `draws` i.i.d. configuration samples with deterministic per-draw RNG
/// streams; parallel across draws when the `parallel` feature is enabled.
pub fn sample_many(bt: &BackwardTable, draws: usize, seed: u64) -> Vec<ChangepointConfig> {
    #[cfg(feature = "parallel")]
    {
        (0..draws)
            .into_par_iter()
            .map(|k| {
                let mut rng = draw_rng(seed, k as u64);
                sample_changepoints(bt, &mut rng)
            })
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        sample_many_seq(bt, draws, seed)
    }
}

/// Sequential counterpart of [`sample_many`]; identical output.
pub fn sample_many_seq(bt: &BackwardTable, draws: usize, seed: u64) -> Vec<ChangepointConfig> {
    (0..draws)
        .map(|k| {
            let mut rng = draw_rng(seed, k as u64);
            sample_changepoints(bt, &mut rng)
        })
        .collect()
}

fn draw_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples segment heights for a fixed configuration: one draw from `H_ji`
/// per segment, broadcast across the segment. Kernel states are recomputed
/// by re-running the kernel over each segment.
pub fn sample_heights<R: Rng + ?Sized>(
    cfg: &ChangepointConfig,
    data: &TimeSeries,
    model: &ModelConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = data.len();
    let family = model.observation;
    let mut heights = vec![0.0; n];
    for (start, end) in cfg.segments(n) {
        let (state, _) = family.run_segment(&data.values()[start - 1..end])?;
        let h = family.sample_height(&state, rng);
        for slot in &mut heights[start - 1..end] {
            *slot = h;
        }
    }
    Ok(heights)
}

/// Entropy of the configuration posterior via the dynamic-programming
/// recursion `e_i = sum_j c̃_ji (e_{j-1} + ln c̃_ji)` with `e_{-1} = e_0 = 0`
/// and `0 ln 0 = 0`; returns `-e_n`. Touches each particle once.
pub fn entropy(bt: &BackwardTable) -> f64 {
    let n = bt.n();
    let mut e = vec![0.0f64; n + 1]; // e[i]; e[0] = 0 covers e_{-1} and e_0
    for i in 1..=n {
        let mut acc = 0.0;
        for &(j, w) in bt.col(i) {
            if w > 0.0 {
                let prior = if j >= 2 { e[j - 1] } else { 0.0 };
                acc += w * (prior + w.ln());
            }
        }
        e[i] = acc;
    }
    -e[n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::filter;
    use crate::model::{LengthPrior, ObservationFamily};

    fn gauss_model(q: f64) -> ModelConfig {
        ModelConfig {
            length_prior: LengthPrior::Geometric { q },
            observation: ObservationFamily::GaussianMeanKnownVar {
                sigma: 1.0,
                mu0: 0.0,
                tau0: 1.0,
            },
            prune: None,
        }
    }

    #[test]
    fn last_row_copies_forward_weights() {
        let data = TimeSeries::new(vec![0.4]).unwrap();
        let res = filter(&data, &gauss_model(0.3)).unwrap();
        let bt = backward_weights(&res, &res.hazard).unwrap();
        for &(j, w) in res.grid.col(1) {
            assert_eq!(bt.weight(j, 1), Some(w));
        }
    }

    #[test]
    fn geometric_backward_equals_forward() {
        // Constant survival factor cancels in the normalization.
        let data = TimeSeries::new(vec![0.1, 1.5, -0.3, 0.0, 2.0]).unwrap();
        let res = filter(&data, &gauss_model(0.25)).unwrap();
        let bt = backward_weights(&res, &res.hazard).unwrap();
        for i in 1..=data.len() {
            for &(j, w) in res.grid.col(i) {
                assert!((bt.weight(j, i).unwrap() - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_columns_normalized() {
        let data = TimeSeries::new(vec![0.1, 3.0, 3.2, -1.0, 0.5, 0.6]).unwrap();
        let res = filter(&data, &gauss_model(0.1)).unwrap();
        let bt = backward_weights(&res, &res.hazard).unwrap();
        for i in 1..=data.len() {
            let s: f64 = bt.col(i).iter().map(|&(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn config_scores_sum_to_one() {
        let data = TimeSeries::new(vec![0.2, -0.1, 2.5, 2.4]).unwrap();
        let res = filter(&data, &gauss_model(0.2)).unwrap();
        let bt = backward_weights(&res, &res.hazard).unwrap();
        let n = data.len();
        let mut total = 0.0;
        for mask in 0..(1u32 << n) {
            let taus: Vec<usize> = (1..=n).filter(|&t| mask >> (t - 1) & 1 == 1).collect();
            let cfg = ChangepointConfig::new(taus, n).unwrap();
            let score = config_log_likelihood(&bt, &cfg);
            assert!(!score.missing_particle);
            total += score.log_likelihood.exp();
        }
        assert!((total - 1.0).abs() < 1e-9, "total = {total}");
    }

    #[test]
    fn config_tau_one_uses_c00_convention() {
        let data = TimeSeries::new(vec![0.2, -0.1, 0.3]).unwrap();
        let res = filter(&data, &gauss_model(0.2)).unwrap();
        let bt = backward_weights(&res, &res.hazard).unwrap();
        let cfg = ChangepointConfig::new(vec![1], 3).unwrap();
        let score = config_log_likelihood(&bt, &cfg);
        let expect = bt.weight(1, 3).unwrap().ln();
        assert!((score.log_likelihood - expect).abs() < 1e-12);
    }

    #[test]
    fn map_beats_all_enumerated_configs() {
        let data = TimeSeries::new(vec![0.0, 0.1, 4.0, 4.2, 4.1]).unwrap();
        let res = filter(&data, &gauss_model(0.15)).unwrap();
        let bt = backward_weights(&res, &res.hazard).unwrap();
        let map = map_segmentation(&bt);
        let map_val = config_log_likelihood(&bt, &map).log_likelihood;
        let n = data.len();
        for mask in 0..(1u32 << n) {
            let taus: Vec<usize> = (1..=n).filter(|&t| mask >> (t - 1) & 1 == 1).collect();
            let cfg = ChangepointConfig::new(taus, n).unwrap();
            let v = config_log_likelihood(&bt, &cfg).log_likelihood;
            assert!(v <= map_val + 1e-9, "cfg {:?} beats MAP", cfg.taus());
        }
    }

    #[test]
    fn flat_data_strong_prior_yields_empty_map() {
        let data = TimeSeries::new(vec![0.01, -0.02, 0.0, 0.01, 0.0, -0.01]).unwrap();
        let res = filter(&data, &gauss_model(0.01)).unwrap();
        let bt = backward_weights(&res, &res.hazard).unwrap();
        assert!(map_segmentation(&bt).is_empty());
    }

    #[test]
    fn forced_changepoints_sample_everything() {
        // Synthetic table with c̃_ii = 1 at every i: every draw is {1..n}.
        let n = 5;
        let cols = (1..=n).map(|i| vec![(i, 1.0)]).collect();
        let bt = BackwardTable::from_columns(cols);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = sample_changepoints(&bt, &mut rng);
        assert_eq!(cfg.taus(), &[1, 2, 3, 4, 5]);
    }

    #[test]
    fn deterministic_posterior_entropy_zero() {
        let n = 4;
        let cols = (1..=n).map(|i| vec![(i, 1.0)]).collect();
        let bt = BackwardTable::from_columns(cols);
        assert!(entropy(&bt).abs() < 1e-12);
    }

    #[test]
    fn sample_many_matches_sequential() {
        let data = TimeSeries::new(vec![0.0, 2.0, 2.1, -1.0]).unwrap();
        let res = filter(&data, &gauss_model(0.2)).unwrap();
        let bt = backward_weights(&res, &res.hazard).unwrap();
        let a = sample_many(&bt, 64, 42);
        let b = sample_many_seq(&bt, 64, 42);
        assert_eq!(a, b);
    }

    #[test]
    fn heights_piecewise_constant_and_segments() {
        let data = TimeSeries::new(vec![0.0, 0.1, 5.0, 5.1, 5.2]).unwrap();
        let model = gauss_model(0.2);
        let cfg = ChangepointConfig::new(vec![3], 5).unwrap();
        assert_eq!(cfg.segments(5), vec![(1, 2), (3, 5)]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = sample_heights(&cfg, &data, &model, &mut rng).unwrap();
        assert_eq!(h[0], h[1]);
        assert_eq!(h[2], h[3]);
        assert_eq!(h[3], h[4]);
        assert_ne!(h[0], h[2]);
    }

    #[test]
    fn single_segment_height_matches_whole_series_posterior() {
        // Mean of many draws at the empty config approaches the full-series
        // posterior mean.
        let data = TimeSeries::new(vec![1.0, 1.2, 0.8, 1.1]).unwrap();
        let model = gauss_model(0.2);
        let cfg = ChangepointConfig::new(vec![], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 20_000;
        let mut acc = 0.0;
        for _ in 0..m {
            acc += sample_heights(&cfg, &data, &model, &mut rng).unwrap()[0];
        }
        let mean = acc / m as f64;
        let (state, _) = model.observation.run_segment(data.values()).unwrap();
        let expect = model.observation.state_moment(&state, 1).unwrap();
        assert!((mean - expect).abs() < 0.02, "{mean} vs {expect}");
    }
}
