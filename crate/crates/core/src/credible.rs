// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sample-based simultaneous credible regions.
//!
//! Given i.i.d. posterior samples `s_1..s_m` of the changepoint set, the
//! coverage of a candidate region `A ⊆ {1..n}` is
//!
//! ```text
//! rel(A, s_1..m) = (1/m) · #{i : s_i ⊆ A}
//! ```
//!
//! The sample-based problem (SBP) asks for a minimum-cardinality `A` with
//! `rel(A) ≥ 1 − α`. It is NP-hard in general; this module provides
//!
//! * a greedy solver producing a nested region ladder over all coverage
//!   levels at once (remove the timepoint contained in the fewest surviving
//!   samples, drop those samples, repeat),
//! * a brute-force enumerator for small `n` (testing oracle),
//! * an ILP export in CPLEX-LP text format for external solvers, with a
//!   round-trip parser,
//! * the Bonferroni / pointwise / joined-HDR baselines, and
//! * importance extraction: the smallest `α` at which a query window is
//!   excluded from the credible region.

use std::collections::BTreeSet;
use std::path::Path;

use crate::{Error, Result};

/// A batch of sampled changepoint sets over `{1..n}` (multiset: duplicate
/// samples are meaningful).
#[derive(Debug, Clone)]
pub struct SampleSet {
    samples: Vec<Vec<usize>>,
    n: usize,
}

impl SampleSet {
    /// Each sample is deduplicated and sorted; elements must lie in `1..=n`.
    pub fn new(samples: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        if n == 0 || samples.is_empty() {
            return Err(Error::InvalidData("need n ≥ 1 and at least one sample".into()));
        }
        let samples = samples
            .into_iter()
            .map(|s| {
                let set: BTreeSet<usize> = s.into_iter().collect();
                if set.iter().any(|&t| t < 1 || t > n) {
                    return Err(Error::InvalidData(format!("sample element outside 1..={n}")));
                }
                Ok(set.into_iter().collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.samples.len()
    }

    pub fn samples(&self) -> &[Vec<usize>] {
        &self.samples
    }
}

/// `rel(A, s)`: fraction of samples entirely contained in `A`.
pub fn coverage_fraction(region: &[usize], samples: &SampleSet) -> f64 {
    let set: BTreeSet<usize> = region.iter().copied().collect();
    let count = samples
        .samples
        .iter()
        .filter(|s| s.iter().all(|t| set.contains(t)))
        .count();
    count as f64 / samples.m() as f64
}

/// One rung of the greedy ladder.
#[derive(Debug, Clone)]
pub struct LadderStep {
    /// Exact coverage `rel(region)` (integer count over `m`).
    pub coverage: f64,
    /// Sorted region elements.
    pub region: Vec<usize>,
}

/// Nested regions for every coverage level, finest (full set) first.
#[derive(Debug, Clone)]
pub struct RegionLadder {
    pub steps: Vec<LadderStep>,
    /// Elementary operation count of the greedy construction
    /// (complexity instrumentation).
    pub ops: usize,
}

/// Greedy SBP solver. Starting from `A = {1..n}`, repeatedly remove the
/// timepoint contained in the fewest surviving samples (ties: lowest index),
/// discarding the samples that contained it; every intermediate region is
/// recorded with its exact coverage. Regions are strictly nested and
/// coverage is non-increasing down the ladder.
pub fn greedy_ladder(samples: &SampleSet) -> RegionLadder {
    let n = samples.n();
    let m = samples.m();
    let mut ops = 0usize;
    let mut alive: Vec<bool> = vec![true; m];
    let mut live_count = m;
    // count[t] = number of surviving samples containing timepoint t.
    let mut count = vec![0usize; n + 1];
    for s in &samples.samples {
        for &t in s {
            count[t] += 1;
            ops += 1;
        }
    }
    let mut in_region = vec![true; n + 1];
    let mut region: Vec<usize> = (1..=n).collect();
    let mut steps = vec![LadderStep {
        coverage: 1.0,
        region: region.clone(),
    }];
    for _ in 0..n {
        // Timepoint with minimal membership among surviving samples.
        let mut best = 0usize;
        let mut best_count = usize::MAX;
        for t in 1..=n {
            ops += 1;
            if in_region[t] && count[t] < best_count {
                best = t;
                best_count = count[t];
            }
        }
        in_region[best] = false;
        for (k, s) in samples.samples.iter().enumerate() {
            if alive[k] && s.binary_search(&best).is_ok() {
                alive[k] = false;
                live_count -= 1;
                for &t in s {
                    count[t] -= 1;
                    ops += 1;
                }
            }
            ops += 1;
        }
        region.retain(|&t| t != best);
        steps.push(LadderStep {
            coverage: live_count as f64 / m as f64,
            region: region.clone(),
        });
    }
    RegionLadder { steps, ops }
}

/// Region for a query level: the smallest ladder region whose coverage still
/// reaches `1 − α` (bracket `rel(A_{ℓ+1}) < 1−α ≤ rel(A_ℓ)`).
pub fn region_for_alpha(ladder: &RegionLadder, alpha: f64) -> &[usize] {
    let target = 1.0 - alpha;
    let mut chosen = &ladder.steps[0];
    for step in &ladder.steps {
        if step.coverage >= target {
            chosen = step;
        } else {
            break;
        }
    }
    &chosen.region
}

/// Smallest integer sample count achieving coverage `≥ 1 − α` over `m`
/// samples, robust to floating-point representation of `α`.
fn required_count(m: usize, alpha: f64) -> usize {
    let t = m as f64 * (1.0 - alpha);
    (t - 1e-9).ceil().max(0.0) as usize
}

/// Exact SBP optimum by subset enumeration (`n ≤ 22`): minimum cardinality,
/// ties broken toward the lexicographically smallest element sequence.
pub fn brute_force_sbp(samples: &SampleSet, alpha: f64) -> Result<Vec<usize>> {
    let n = samples.n();
    if n > 22 {
        return Err(Error::SizeLimit(format!(
            "exhaustive SBP limited to n ≤ 22 (got {n})"
        )));
    }
    let m = samples.m();
    let need = required_count(m, alpha);
    // Deduplicate samples into bitmasks with multiplicities.
    let mut masks: Vec<(u32, usize)> = Vec::new();
    for s in &samples.samples {
        let mask = s.iter().fold(0u32, |acc, &t| acc | 1 << (t - 1));
        match masks.iter_mut().find(|(mk, _)| *mk == mask) {
            Some((_, mult)) => *mult += 1,
            None => masks.push((mask, 1)),
        }
    }
    let mut best: Option<(u32, Vec<usize>)> = None; // (popcount, elements)
    for a in 0..(1u32 << n) {
        let size = a.count_ones();
        if let Some((bs, _)) = &best {
            if size > *bs {
                continue;
            }
        }
        let covered: usize = masks
            .iter()
            .filter(|(mk, _)| mk & !a == 0)
            .map(|&(_, mult)| mult)
            .sum();
        if covered < need {
            continue;
        }
        let elems: Vec<usize> = (1..=n).filter(|&t| a >> (t - 1) & 1 == 1).collect();
        let better = match &best {
            None => true,
            Some((bs, be)) => size < *bs || (size == *bs && elems < *be),
        };
        if better {
            best = Some((size, elems));
        }
    }
    Ok(best.expect("the full set always covers").1)
}

/// A parsed LP model (round-trip validation of [`export_ilp`]).
#[derive(Debug, Clone, PartialEq)]
pub struct IlpModel {
    /// Objective variable names (all coefficients are 1).
    pub objective: Vec<String>,
    /// `(name, terms, rhs)` rows of `Σ coef·var ≥ rhs`.
    pub constraints: Vec<(String, Vec<(f64, String)>, f64)>,
    pub binaries: Vec<String>,
}

/// Writes the SBP ILP in CPLEX-LP text format.
///
/// Binary `U_i` marks timepoint `i` as inside the region, binary `F_j`
/// marks sample `j` as covered. Constraints: `Σ_j F_j ≥ m(1−α)` and, for
/// each timepoint `i` contained in at least one sample,
/// `|D(i)|·U_i − Σ_{j ∈ D(i)} F_j ≥ 0` with `D(i) = {j : i ∈ s_j}` — a
/// sample can only count as covered if every timepoint it contains is
/// selected.
pub fn export_ilp(samples: &SampleSet, alpha: f64, path: &Path) -> Result<()> {
    let text = render_ilp(samples, alpha);
    std::fs::write(path, text)?;
    Ok(())
}

fn render_ilp(samples: &SampleSet, alpha: f64) -> String {
    let n = samples.n();
    let m = samples.m();
    let mut out = String::new();
    out.push_str("Minimize\n obj: ");
    out.push_str(
        &(1..=n)
            .map(|i| format!("U{i}"))
            .collect::<Vec<_>>()
            .join(" + "),
    );
    out.push_str("\nSubject To\n cover: ");
    out.push_str(
        &(1..=m)
            .map(|j| format!("F{j}"))
            .collect::<Vec<_>>()
            .join(" + "),
    );
    out.push_str(&format!(" >= {}\n", required_count(m, alpha)));
    for i in 1..=n {
        let d: Vec<usize> = samples
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.binary_search(&i).is_ok())
            .map(|(j, _)| j + 1)
            .collect();
        if d.is_empty() {
            continue;
        }
        let mut row = format!(" t{i}: {} U{i}", d.len());
        for j in &d {
            row.push_str(&format!(" - F{j}"));
        }
        row.push_str(" >= 0\n");
        out.push_str(&row);
    }
    out.push_str("Binaries\n ");
    let mut names: Vec<String> = (1..=n).map(|i| format!("U{i}")).collect();
    names.extend((1..=m).map(|j| format!("F{j}")));
    out.push_str(&names.join(" "));
    out.push_str("\nEnd\n");
    out
}

/// Parses a file produced by [`export_ilp`] (structural round-trip checks).
pub fn parse_ilp(path: &Path) -> Result<IlpModel> {
    let text = std::fs::read_to_string(path)?;
    let mut objective = Vec::new();
    let mut constraints = Vec::new();
    let mut binaries = Vec::new();
    #[derive(PartialEq)]
    enum Section {
        None,
        Objective,
        Constraints,
        Binaries,
    }
    let mut section = Section::None;
    for raw in text.lines() {
        let line = raw.trim();
        match line {
            "Minimize" => section = Section::Objective,
            "Subject To" => section = Section::Constraints,
            "Binaries" => section = Section::Binaries,
            "End" => break,
            "" => {}
            _ => match section {
                Section::Objective => {
                    let body = line
                        .split_once(':')
                        .map(|(_, b)| b)
                        .unwrap_or(line);
                    objective.extend(
                        body.split('+').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()),
                    );
                }
                Section::Constraints => {
                    let (name, body) = line.split_once(':').ok_or_else(|| {
                        Error::InvalidData(format!("constraint without name: {line}"))
                    })?;
                    let (lhs, rhs) = body.split_once(">=").ok_or_else(|| {
                        Error::InvalidData(format!("constraint without >=: {line}"))
                    })?;
                    let rhs: f64 = rhs.trim().parse().map_err(|_| {
                        Error::InvalidData(format!("bad right-hand side: {line}"))
                    })?;
                    let mut terms = Vec::new();
                    let mut sign = 1.0f64;
                    for tok in lhs.split_whitespace() {
                        match tok {
                            "+" => sign = 1.0,
                            "-" => sign = -1.0,
                            _ => {
                                if let Ok(coef) = tok.parse::<f64>() {
                                    sign *= coef;
                                } else {
                                    terms.push((sign, tok.to_string()));
                                    sign = 1.0;
                                }
                            }
                        }
                    }
                    constraints.push((name.trim().to_string(), terms, rhs));
                }
                Section::Binaries => {
                    binaries.extend(line.split_whitespace().map(str::to_string));
                }
                Section::None => {
                    return Err(Error::InvalidData(format!("unexpected line: {line}")))
                }
            },
        }
    }
    Ok(IlpModel {
        objective,
        constraints,
        binaries,
    })
}

/// Bonferroni baseline: `{i : p_i > α/n}` from the changepoint marginals.
pub fn bonferroni_region(marginals: &[f64], alpha: f64) -> Vec<usize> {
    let n = marginals.len() as f64;
    marginals
        .iter()
        .enumerate()
        .filter(|&(_, &p)| p > alpha / n)
        .map(|(k, _)| k + 1)
        .collect()
}

/// Pointwise lower set `{i : p_i > α}`: a subset of every valid
/// simultaneous `(1 − α)` region, hence a lower bound.
pub fn pointwise_lower_set(marginals: &[f64], alpha: f64) -> Vec<usize> {
    marginals
        .iter()
        .enumerate()
        .filter(|&(_, &p)| p > alpha)
        .map(|(k, _)| k + 1)
        .collect()
}

/// Joined highest-density region: union of the `⌈m(1−α)⌉` most probable
/// samples (`∅` at `α = 1`). `logprobs[k]` must score `samples[k]`.
pub fn joined_hdr(samples: &SampleSet, logprobs: &[f64], alpha: f64) -> Result<Vec<usize>> {
    let m = samples.m();
    if logprobs.len() != m {
        return Err(Error::InvalidData(format!(
            "{} scores for {} samples",
            logprobs.len(),
            m
        )));
    }
    let take = (m as f64 * (1.0 - alpha)).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| logprobs[b].total_cmp(&logprobs[a]));
    let mut union = BTreeSet::new();
    for &k in order.iter().take(take) {
        union.extend(samples.samples[k].iter().copied());
    }
    Ok(union.into_iter().collect())
}

/// Importance of a query window: the smallest `α` (over the ladder's
/// coverage grid) at which the credible region no longer meets the window;
/// `1.0` if every ladder region intersects it.
pub fn importance(ladder: &RegionLadder, window: &[usize]) -> Result<f64> {
    if window.is_empty() {
        return Err(Error::InvalidData("empty importance window".into()));
    }
    let win: BTreeSet<usize> = window.iter().copied().collect();
    let mut best: Option<f64> = None;
    for step in &ladder.steps {
        let disjoint = step.region.iter().all(|t| !win.contains(t));
        if disjoint {
            best = Some(best.map_or(step.coverage, |b: f64| b.max(step.coverage)));
        }
    }
    Ok(best.map_or(1.0, |c| 1.0 - c))
}

/// The default query grid `{1/30, …, 29/30}`.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=29).map(|k| f64::from(k) / 30.0).collect()
}
