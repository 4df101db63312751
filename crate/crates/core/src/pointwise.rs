// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear-in-particles pointwise inference.
//!
//! Two quantities are computed from the retrospective weights:
//!
//! ```text
//! q̃_i = P(C_i = i | y_1..y_n)        (changepoint marginal at i)
//!     = sum_{ℓ=i}^{n-1} c̃_iℓ q̃_{ℓ+1} + c̃_in
//! ```
//!
//! evaluated descending from `i = n`, touching each particle once, and the
//! per-timepoint height-functional trajectories
//!
//! ```text
//! E[f(X_i) | y_1..y_n] = sum_{j <= i <= ℓ} H^f_jℓ · w_jℓ
//! w_jℓ = c̃_jℓ q̃_{ℓ+1}  (ℓ < n),   w_jn = c̃_jn
//! ```
//!
//! where `H^f_jℓ` is the posterior functional of the segment height on
//! `[j, ℓ]`. The trajectory is swept incrementally from `i = n` down to 1:
//! moving to `i` removes the row `j = i+1` and adds the column `ℓ = i`
//! (scaled by `q̃_{i+1}`), so each particle is read at most twice overall.
//! Exact-formula resynchronization every [`RESYNC_INTERVAL`] timepoints keeps
//! floating-point drift bounded without sacrificing linearity.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use serde::Serialize;

use crate::model::{ModelConfig, ObservationFamily, TimeSeries};
use crate::posterior::BackwardTable;
use crate::Result;

/// Timepoints between exact-formula resynchronizations of the incremental
/// trajectory sweep.
pub const RESYNC_INTERVAL: usize = 512;

/// Changepoint marginals `q̃_1..q̃_n`, descending recursion over rows.
pub fn changepoint_marginals(bt: &BackwardTable) -> Vec<f64> {
    let n = bt.n();
    let rows = bt.rows();
    // q[i] = q̃_i for i in 1..=n; q[n + 1] slot avoided by casing ℓ = n.
    let mut q = vec![0.0f64; n + 1];
    for i in (1..=n).rev() {
        let mut acc = 0.0;
        for &(l, w) in &rows[i] {
            acc += if l == n { w } else { w * q[l + 1] };
        }
        q[i] = acc.clamp(0.0, 1.0);
    }
    q.remove(0);
    q
}

/// Per-row tables of the first three raw height moments `H^{x^m}_jℓ`,
/// aligned with the live particles of the backward table.
pub struct HeightTables {
    /// `rows[j]`: `(ℓ, [E X, E X², E X³])` ascending in `ℓ`, for `j = 0..=n`.
    rows: Vec<Vec<(usize, [f64; 3])>>,
}

impl HeightTables {
    pub fn rows(&self) -> &[Vec<(usize, [f64; 3])>] {
        &self.rows
    }
}

/// Builds the moment tables with one kernel re-run per live row. Row `j = 0`
/// shares the kernel of the segment starting at 1.
pub fn height_tables(
    bt: &BackwardTable,
    data: &TimeSeries,
    family: &ObservationFamily,
) -> Result<HeightTables> {
    let bt_rows = bt.rows();
    let build_row = |j: usize, entries: &Vec<(usize, f64)>| -> Result<Vec<(usize, [f64; 3])>> {
        if entries.is_empty() {
            return Ok(Vec::new());
        }
        let start = j.max(1);
        let mut state = family.fresh_state();
        let mut out = Vec::with_capacity(entries.len());
        let mut pos = start;
        for &(l, _) in entries {
            while pos <= l {
                family.update_state(&mut state, data.value(pos))?;
                pos += 1;
            }
            out.push((
                l,
                [
                    family.state_moment(&state, 1)?,
                    family.state_moment(&state, 2)?,
                    family.state_moment(&state, 3)?,
                ],
            ));
        }
        Ok(out)
    };
    #[cfg(feature = "parallel")]
    let rows: Result<Vec<_>> = bt_rows
        .par_iter()
        .enumerate()
        .map(|(j, entries)| build_row(j, entries))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let rows: Result<Vec<_>> = bt_rows
        .iter()
        .enumerate()
        .map(|(j, entries)| build_row(j, entries))
        .collect();
    Ok(HeightTables { rows: rows? })
}

/// Read counters for the trajectory sweep instrumentation.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrajectoryCounters {
    /// Particle reads by the incremental add/remove updates (≤ 2 per
    /// particle).
    pub incremental_reads: usize,
    /// Additional reads spent on exact resynchronization.
    pub resync_reads: usize,
}

/// Segment weight `w_jℓ` (probability the realized segmentation contains the
/// segment `[j, ℓ]`, head segment for `j = 0`).
#[inline]
fn segment_weight(l: usize, n: usize, c: f64, qtilde: &[f64]) -> f64 {
    if l == n {
        c
    } else {
        c * qtilde[l] // qtilde[l] = q̃_{ℓ+1} (0-based slice)
    }
}

/// Direct mixture evaluation of `E[f(X_i)]` for one timepoint (used for
/// resynchronization and as the from-scratch reference).
fn direct_at(
    i: usize,
    n: usize,
    bt_rows: &[Vec<(usize, f64)>],
    tables: &HeightTables,
    qtilde: &[f64],
    reads: &mut usize,
) -> [f64; 3] {
    let mut acc = [0.0f64; 3];
    for j in 0..=i {
        let entries = &bt_rows[j];
        let start = entries.partition_point(|&(l, _)| l < i);
        for (&(l, c), &(_, h)) in entries[start..].iter().zip(&tables.rows[j][start..]) {
            let w = segment_weight(l, n, c, qtilde);
            *reads += 1;
            for m in 0..3 {
                acc[m] += w * h[m];
            }
        }
    }
    acc
}

/// Raw-moment trajectories `E[X_i^m]`, `m = 1..3`, via the incremental
/// add/remove sweep. `resync_every = None` disables resynchronization
/// (reference/testing); `Some(k)` re-evaluates the direct formula every `k`
/// steps.
pub fn height_moment_trajectory(
    bt: &BackwardTable,
    qtilde: &[f64],
    data: &TimeSeries,
    family: &ObservationFamily,
    resync_every: Option<usize>,
) -> Result<(Vec<[f64; 3]>, TrajectoryCounters)> {
    let n = bt.n();
    let tables = height_tables(bt, data, family)?;
    let bt_rows = bt.rows();
    let mut counters = TrajectoryCounters::default();
    let mut out = vec![[0.0f64; 3]; n];

    // i = n: column n, equivalently all rows' final entries with ℓ = n.
    let mut cur = [0.0f64; 3];
    for (j, entries) in bt_rows.iter().enumerate() {
        if let Some(pos) = entries.iter().rposition(|&(l, _)| l == n) {
            let c = entries[pos].1;
            let h = tables.rows[j][pos].1;
            counters.incremental_reads += 1;
            for m in 0..3 {
                cur[m] += c * h[m];
            }
        }
    }
    out[n - 1] = cur;

    for i in (1..n).rev() {
        // Remove segments starting at i+1 (row i+1), add segments ending at
        // i (column i, scaled by q̃_{i+1}).
        let row = i + 1;
        for (&(l, c), &(_, h)) in bt_rows[row].iter().zip(&tables.rows[row]) {
            let w = segment_weight(l, n, c, qtilde);
            counters.incremental_reads += 1;
            for m in 0..3 {
                cur[m] -= w * h[m];
            }
        }
        let q_next = qtilde[i]; // q̃_{i+1}
        for j in 0..=i {
            let entries = &bt_rows[j];
            if let Ok(pos) = entries.binary_search_by_key(&i, |&(l, _)| l) {
                let c = entries[pos].1;
                let h = tables.rows[j][pos].1;
                counters.incremental_reads += 1;
                for m in 0..3 {
                    cur[m] += q_next * c * h[m];
                }
            }
        }
        if let Some(k) = resync_every {
            if (n - i) % k == 0 {
                cur = direct_at(i, n, &bt_rows, &tables, qtilde, &mut counters.resync_reads);
            }
        }
        out[i - 1] = cur;
    }
    Ok((out, counters))
}

/// Raw-moment trajectories evaluated from scratch at every timepoint
/// (quadratic in particles; reference for the incremental sweep).
pub fn direct_moment_trajectory(
    bt: &BackwardTable,
    qtilde: &[f64],
    data: &TimeSeries,
    family: &ObservationFamily,
) -> Result<Vec<[f64; 3]>> {
    let n = bt.n();
    let tables = height_tables(bt, data, family)?;
    let bt_rows = bt.rows();
    let mut reads = 0usize;
    Ok((1..=n)
        .map(|i| direct_at(i, n, &bt_rows, &tables, qtilde, &mut reads))
        .collect())
}

/// Summary band `[m - 2(sd - sk·1{sk<0}), m + 2(sd + sk·1{sk>=0})]` per
/// timepoint, with the central moments expanded from the raw ones.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryBands {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub skew: Vec<f64>,
    pub band_lo: Vec<f64>,
    pub band_hi: Vec<f64>,
    /// Timepoints where rounding produced a negative variance (clamped to 0).
    pub variance_clamps: usize,
}

pub fn summary_bands(moments: &[[f64; 3]]) -> SummaryBands {
    let n = moments.len();
    let mut bands = SummaryBands {
        mean: Vec::with_capacity(n),
        sd: Vec::with_capacity(n),
        skew: Vec::with_capacity(n),
        band_lo: Vec::with_capacity(n),
        band_hi: Vec::with_capacity(n),
        variance_clamps: 0,
    };
    for &[m1, m2, m3] in moments {
        let mut var = m2 - m1 * m1;
        if var < 0.0 {
            var = 0.0;
            bands.variance_clamps += 1;
        }
        let sd = var.sqrt();
        let central3 = m3 - 3.0 * m1 * m2 + 2.0 * m1 * m1 * m1;
        let sk = if sd > 0.0 { central3 / (sd * sd * sd) } else { 0.0 };
        let lo = m1 - 2.0 * (sd - sk * f64::from(sk < 0.0));
        let hi = m1 + 2.0 * (sd + sk * f64::from(sk >= 0.0));
        bands.mean.push(m1);
        bands.sd.push(sd);
        bands.skew.push(sk);
        bands.band_lo.push(lo);
        bands.band_hi.push(hi);
    }
    bands
}

/// Full pointwise report: marginals, expected changepoint count, moment
/// trajectories, and summary bands.
#[derive(Debug, Clone, Serialize)]
pub struct MarginalReport {
    pub q_tilde: Vec<f64>,
    pub expected_count: f64,
    pub bands: SummaryBands,
}

pub fn marginal_report(
    bt: &BackwardTable,
    data: &TimeSeries,
    model: &ModelConfig,
) -> Result<MarginalReport> {
    let q_tilde = changepoint_marginals(bt);
    let expected_count = q_tilde.iter().sum();
    let (moments, _) = height_moment_trajectory(
        bt,
        &q_tilde,
        data,
        &model.observation,
        Some(RESYNC_INTERVAL),
    )?;
    Ok(MarginalReport {
        q_tilde,
        expected_count,
        bands: summary_bands(&moments),
    })
}
