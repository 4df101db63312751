// SPDX-License-Identifier: MIT OR Apache-2.0

//! Laplacian change-in-median segment kernel.
//!
//! A segment's posterior height density is proportional to
//!
//! ```text
//! exp(-E(x)),   E(x) = sum_l |x - z_l| / sigma_l
//! ```
//!
//! where the breakpoint multiset always holds the prior `(mu, 1/tau)` plus one
//! `(y_l, 1/sigma)` per absorbed observation. `E` is continuous piecewise
//! linear: with breakpoints sorted ascending, piece `j` (between `z_j` and
//! `z_{j+1}`) has
//!
//! ```text
//! -E(x) = d_j x + e_j
//! d_j = -sum_{l<=j} 1/sigma_l + sum_{l>j} 1/sigma_l     (strictly decreasing)
//! e_j =  sum_{l<=j} z_l/sigma_l - sum_{l>j} z_l/sigma_l
//! ```
//!
//! so `d_0 > 0 > d_r` and every integral against the density reduces to a sum
//! of piecewise-exponential terms, evaluated piece by piece:
//!
//! ```text
//! int g(x) exp(-E(x)) dx = sum_j int_{piece j} g(x) exp(d_j x + e_j) dx
//! ```
//!
//! Each piece is anchored at the endpoint where its exponent is largest (the
//! right endpoint when `d_j > 0`): substituting `x = anchor + s t`, `s = ±1`,
//! makes the local slope non-positive. Expanding `g(anchor + s t)` as a cubic
//! `sum_k c_k t^k`, a bounded piece of width `w` reduces to the base
//! integrals
//!
//! ```text
//! J_k(d, w) = int_0^w t^k exp(d t) dt,   d <= 0,
//! ```
//!
//! computed by a Maclaurin series for small `|d| w`, by the positive-term
//! tail series `J_k = k! exp(d w) / |d|^{k+1} * sum_{i>k} (|d| w)^i / i!` for
//! moderate `|d| w`, and by the integration-by-parts recurrence once
//! `exp(d w)` is negligible. A tail piece reduces to `k! / |d|^{k+1}`.
//! Anchoring each piece locally keeps every term bounded by the piece's own
//! mass, avoiding the catastrophic cancellation of the telescoped
//! antiderivative form, whose `1/d_j^4` terms explode on near-plateau pieces.
//!
//! All exponents are stabilized by subtracting their maximum `m` (attained at
//! the weighted median of the breakpoints, the density's mode), so every
//! exponentiated quantity is `<= 0`; `m` is reintroduced only in log-domain
//! results and cancels in moment ratios.
//!
//! Integrand families (as cubics around a piece anchor):
//!
//! * power moments `g(x) = x^m`, `m <= 3`: `c_k = C(m, k) anchor^{m-k} s^k`;
//! * absolute moment `g(x) = |x - c|` (the center `c` is inserted as a
//!   zero-weight breakpoint so no piece straddles it, and the interior sign
//!   of the piece relative to `c` multiplies the coefficients);
//! * energy expectation `g(x) = E(x) = -(d_j x + e_j)` on piece `j`.

use rand::Rng;

use crate::{Error, Result};

/// One breakpoint of the piecewise-linear energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakpoint {
    /// Location `z_l`.
    pub z: f64,
    /// Inverse scale `1/sigma_l` (zero allowed only for synthetic split
    /// points inserted during absolute-moment integration).
    pub w: f64,
}

/// Sorted-breakpoint representation of a segment's height posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceSegState {
    /// Breakpoints sorted ascending by location (duplicates allowed).
    points: Vec<Breakpoint>,
    /// Current stabilizer: max of the negative energy, attained at the
    /// weighted median.
    stabilizer: f64,
    /// Cached `ln Z^0 = ln int exp(-E(x)) dx` (true value, stabilizer folded
    /// back in).
    log_z0: f64,
}

impl LaplaceSegState {
    /// Fresh state holding only the prior breakpoint `(mu, 1/tau)`;
    /// `Z^0 = 2 tau`.
    pub fn prior(mu: f64, tau: f64) -> Self {
        let mut st = Self {
            points: vec![Breakpoint { z: mu, w: 1.0 / tau }],
            stabilizer: 0.0,
            log_z0: (2.0 * tau).ln(),
        };
        st.refresh();
        st
    }

    /// Breakpoints, sorted ascending.
    pub fn breakpoints(&self) -> &[Breakpoint] {
        &self.points
    }

    /// Cached `ln Z^0`.
    pub fn log_z0(&self) -> f64 {
        self.log_z0
    }

    /// Current stabilizer (max of the negative energy).
    pub fn stabilizer(&self) -> f64 {
        self.stabilizer
    }

    /// Inserts observation `y` with scale `sigma` and returns the log
    /// predictive `ln r = ln Z0_new - ln Z0_old - ln(2 sigma)`.
    pub fn insert(&mut self, y: f64, sigma: f64) -> Result<f64> {
        if !y.is_finite() {
            return Err(Error::InvalidData(format!("non-finite observation {y}")));
        }
        let old_log_z0 = self.log_z0;
        let idx = self.points.partition_point(|p| p.z < y);
        self.points.insert(idx, Breakpoint { z: y, w: 1.0 / sigma });
        self.refresh();
        Ok(self.log_z0 - old_log_z0 - (2.0 * sigma).ln())
    }

    /// Mode of the density: the weighted median of the breakpoints (lowest
    /// location where the cumulative weight reaches half the total).
    pub fn mode(&self) -> f64 {
        let total: f64 = self.points.iter().map(|p| p.w).sum();
        let mut acc = 0.0;
        for p in &self.points {
            acc += p.w;
            if 2.0 * acc >= total {
                return p.z;
            }
        }
        self.points.last().expect("nonempty").z
    }

    fn refresh(&mut self) {
        let (m, sum) = self.integrate(&PowerMoment(0));
        self.stabilizer = m;
        self.log_z0 = m + sum.ln();
    }

    /// Core piecewise integral: returns `(m, s)` with
    /// `int g(x) exp(-E(x)) dx = exp(m) * s`, where `m` is the stabilizer.
    fn integrate(&self, g: &dyn PieceIntegrand) -> (f64, f64) {
        integrate_breakpoints(&self.points, g)
    }

    /// `ln Z^0` recomputed from scratch (power moment `m = 0`).
    pub fn log_partition(&self) -> f64 {
        let (m, s) = self.integrate(&PowerMoment(0));
        m + s.ln()
    }

    /// Raw posterior moment `E[X^m]`, `m` in `1..=3`.
    pub fn moment(&self, m: u32) -> Result<f64> {
        if !(1..=3).contains(&m) {
            return Err(Error::Undefined(format!("moment order {m} unsupported")));
        }
        let (s0_m, s0) = self.integrate(&PowerMoment(0));
        let (sm_m, sm) = self.integrate(&PowerMoment(m));
        debug_assert_eq!(s0_m, sm_m);
        Ok(sm / s0)
    }

    /// `E[|X - center|]` under the posterior. The center is inserted as a
    /// zero-weight breakpoint so no integration piece straddles it.
    pub fn abs_moment(&self, center: f64) -> f64 {
        let mut pts = self.points.clone();
        let idx = pts.partition_point(|p| p.z < center);
        pts.insert(idx, Breakpoint { z: center, w: 0.0 });
        let (m0, s0) = integrate_breakpoints(&pts, &PowerMoment(0));
        let (ma, sa) = integrate_breakpoints(&pts, &AbsMoment { center });
        debug_assert_eq!(m0, ma);
        sa / s0
    }

    /// `E[sum_l |X - z_l| / sigma_l]`: the expected energy, including the
    /// prior breakpoint's term.
    pub fn energy_expectation(&self) -> f64 {
        let (m0, s0) = self.integrate(&PowerMoment(0));
        let (me, se) = self.integrate(&EnergyExpectation);
        debug_assert_eq!(m0, me);
        se / s0
    }

    /// Exact draw from the posterior via inverse CDF over the
    /// piecewise-exponential pieces: choose a piece proportional to its mass,
    /// then invert the truncated exponential within it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let geom = PieceGeometry::new(&self.points);
        let r = self.points.len();
        // Piece masses, stabilized by the shared maximum exponent.
        let m = (1..=r)
            .map(|l| geom.d[l] * self.points[l - 1].z + geom.e[l])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut masses = Vec::with_capacity(r + 1);
        for j in 0..=r {
            masses.push(geom.piece_mass(&self.points, j, m));
        }
        let total: f64 = masses.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut piece = r;
        for (j, &mass) in masses.iter().enumerate() {
            if u <= mass {
                piece = j;
                break;
            }
            u -= mass;
        }
        let v: f64 = rng.gen();
        let d = geom.d[piece];
        if piece == 0 {
            // (-inf, z_1], density ~ exp(d x), d > 0.
            self.points[0].z + v.ln() / d
        } else if piece == r {
            // [z_r, inf), density ~ exp(d x), d < 0.
            self.points[r - 1].z + v.ln() / d
        } else {
            let a = self.points[piece - 1].z;
            let b = self.points[piece].z;
            let w = b - a;
            let t = d * w;
            if t.abs() < 1e-12 {
                a + v * w
            } else if t > 0.0 {
                // Mass concentrated at b; invert from the right endpoint.
                b + (1.0 - v * (-(-t).exp_m1())).ln() / d
            } else {
                a + (1.0 - v * (-t.exp_m1())).ln() / d
            }
        }
    }

    /// Asserts the slope/intercept invariants (strictly decreasing slopes,
    /// `d_0 > 0 > d_r`, continuity at breakpoints). Test support.
    pub fn check_invariants(&self) -> Result<()> {
        let geom = PieceGeometry::new(&self.points);
        let r = self.points.len();
        if !(geom.d[0] > 0.0 && geom.d[r] < 0.0) {
            return Err(Error::Numeric("integrability violated: d_0 <= 0 or d_r >= 0".into()));
        }
        for l in 1..=r {
            let z = self.points[l - 1].z;
            let lhs = geom.d[l - 1] * z + geom.e[l - 1];
            let rhs = geom.d[l] * z + geom.e[l];
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            if (lhs - rhs).abs() > 1e-10 * scale {
                return Err(Error::Numeric(format!(
                    "continuity violated at breakpoint {l}: {lhs} vs {rhs}"
                )));
            }
        }
        Ok(())
    }
}

/// Piece slopes and intercepts derived from the breakpoint prefix sums.
struct PieceGeometry {
    /// `d[j]`, `e[j]` for pieces `j = 0..=r`.
    d: Vec<f64>,
    e: Vec<f64>,
}

impl PieceGeometry {
    fn new(points: &[Breakpoint]) -> Self {
        let r = points.len();
        let tot_w: f64 = points.iter().map(|p| p.w).sum();
        let tot_zw: f64 = points.iter().map(|p| p.z * p.w).sum();
        let mut d = Vec::with_capacity(r + 1);
        let mut e = Vec::with_capacity(r + 1);
        let mut pre_w = 0.0;
        let mut pre_zw = 0.0;
        d.push(tot_w);
        e.push(-tot_zw);
        for p in points {
            pre_w += p.w;
            pre_zw += p.z * p.w;
            d.push(tot_w - 2.0 * pre_w);
            e.push(2.0 * pre_zw - tot_zw);
        }
        Self { d, e }
    }

    /// Mass of piece `j` under `exp(-E)`, scaled by `exp(-m)`.
    fn piece_mass(&self, points: &[Breakpoint], j: usize, m: f64) -> f64 {
        let r = points.len();
        let d = self.d[j];
        let e = self.e[j];
        if j == 0 {
            ((d * points[0].z + e) - m).exp() / d
        } else if j == r {
            ((d * points[r - 1].z + e) - m).exp() / (-d)
        } else {
            let a = points[j - 1].z;
            let b = points[j].z;
            let w = b - a;
            if d == 0.0 {
                (e - m).exp() * w
            } else if d > 0.0 {
                ((d * b + e) - m).exp() * (-(-d * w).exp_m1()) / d
            } else {
                ((d * a + e) - m).exp() * (-(d * w).exp_m1()) / (-d)
            }
        }
    }
}

/// Cubic expansion of one integrand family around a piece anchor: the
/// coefficients `c_k` of `g(anchor + s t) = sum_k c_k t^k` on a single piece
/// with geometry `(d, e)`.
trait PieceIntegrand {
    /// Coefficients of `g(anchor + s t)` as a cubic in `t` on the piece with
    /// slope `d` and intercept `e`; `sign` is the absolute-moment interior
    /// sign supplied by the caller (`1.0` for sign-free integrands).
    fn coeffs(&self, anchor: f64, s: f64, d: f64, e: f64, sign: f64) -> [f64; 4];
    /// Sign hook for the absolute moment: sign of the piece interior relative
    /// to the center. `piece_right_of` tells whether the piece lies at or
    /// right of the center.
    fn sign(&self, _piece_right_of_center: bool) -> f64 {
        1.0
    }
    /// Center used to classify pieces; `None` for sign-free integrands.
    fn center(&self) -> Option<f64> {
        None
    }
}

struct PowerMoment(u32);

impl PieceIntegrand for PowerMoment {
    fn coeffs(&self, anchor: f64, s: f64, _d: f64, _e: f64, _sign: f64) -> [f64; 4] {
        // (anchor + s t)^m = sum_k C(m, k) anchor^(m-k) s^k t^k
        let m = self.0 as usize;
        let mut c = [0.0; 4];
        let mut binom = 1.0;
        for (k, slot) in c.iter_mut().enumerate().take(m + 1) {
            *slot = binom * anchor.powi((m - k) as i32) * s.powi(k as i32);
            binom *= (m - k) as f64 / (k + 1) as f64;
        }
        c
    }
}

struct AbsMoment {
    center: f64,
}

impl PieceIntegrand for AbsMoment {
    fn coeffs(&self, anchor: f64, s: f64, _d: f64, _e: f64, sign: f64) -> [f64; 4] {
        // sign * (anchor + s t - center)
        [sign * (anchor - self.center), sign * s, 0.0, 0.0]
    }

    fn sign(&self, piece_right_of_center: bool) -> f64 {
        if piece_right_of_center {
            1.0
        } else {
            -1.0
        }
    }

    fn center(&self) -> Option<f64> {
        Some(self.center)
    }
}

struct EnergyExpectation;

impl PieceIntegrand for EnergyExpectation {
    fn coeffs(&self, anchor: f64, s: f64, d: f64, e: f64, _sign: f64) -> [f64; 4] {
        // E(anchor + s t) = -(d (anchor + s t) + e) on the piece
        [-(d * anchor + e), -d * s, 0.0, 0.0]
    }
}

/// Base integrals `J_k = int_0^w t^k exp(d t) dt` for `k = 0..=3`, `d <= 0`.
///
/// Branches by `x = d w`: a Maclaurin series (`J_k = w^{k+1} sum_j x^j /
/// (j! (k+j+1))`) near zero, the positive-term tail series (`J_k =
/// k! exp(x) / |d|^{k+1} * sum_{i>k} (-x)^i / i!`) for moderate `|x|`, and
/// the integration-by-parts recurrence `J_k = (k J_{k-1} - w^k exp(x)) /
/// (-d)` once `exp(x)` is negligible against `k J_{k-1}`. Every branch sums
/// only same-sign terms of bounded magnitude.
fn j_moments(d: f64, w: f64) -> [f64; 4] {
    debug_assert!(d <= 0.0 && w > 0.0);
    let x = d * w;
    let mut out = [0.0; 4];
    if x > -0.9 {
        let mut wk = w;
        for (k, slot) in out.iter_mut().enumerate() {
            let mut p = 1.0; // x^j / j!
            let mut acc = 1.0 / (k as f64 + 1.0);
            for j in 1..64 {
                p *= x / j as f64;
                let term = p / (k + j + 1) as f64;
                acc += term;
                if term.abs() < 1e-18 * acc {
                    break;
                }
            }
            *slot = wk * acc;
            wk *= w;
        }
    } else if x > -30.0 {
        let y = -x;
        let ex = x.exp();
        let mut kfac = 1.0;
        let mut dpow = -d;
        for (k, slot) in out.iter_mut().enumerate() {
            let mut term = 1.0; // builds y^(k+1) / (k+1)!
            for i in 1..=(k + 1) {
                term *= y / i as f64;
            }
            let mut acc = term;
            let mut i = k + 2;
            while i < 400 {
                term *= y / i as f64;
                acc += term;
                if term < 1e-18 * acc {
                    break;
                }
                i += 1;
            }
            *slot = kfac * ex * acc / dpow;
            kfac *= (k + 1) as f64;
            dpow *= -d;
        }
    } else {
        let ex = x.exp();
        out[0] = w * x.exp_m1() / x;
        let mut wk = 1.0;
        for k in 1..4 {
            wk *= w;
            out[k] = (k as f64 * out[k - 1] - wk * ex) / (-d);
        }
    }
    out
}

/// Piecewise integral over a sorted breakpoint list. Returns `(m, s)` with
/// the integral equal to `exp(m) * s`; `m` is the maximum breakpoint
/// exponent (the stabilizer). Every piece is evaluated around its own
/// max-exponent anchor, so no large intermediate terms cancel.
fn integrate_breakpoints(points: &[Breakpoint], g: &dyn PieceIntegrand) -> (f64, f64) {
    let geom = PieceGeometry::new(points);
    let r = points.len();
    let exponent = |l: usize| geom.d[l] * points[l - 1].z + geom.e[l];
    let m = (1..=r).map(exponent).fold(f64::NEG_INFINITY, f64::max);
    // Piece j lies right of the center iff its left endpoint z_j >= center
    // (pieces never straddle the center by construction). Piece 0 has no left
    // endpoint: it is right of the center only in the degenerate case where
    // the center precedes all breakpoints, which cannot happen since the
    // center is itself a breakpoint.
    let right_of = |j: usize| -> bool {
        match g.center() {
            None => true,
            Some(c) => j >= 1 && points[j - 1].z >= c,
        }
    };
    let mut sum = 0.0;
    // Tail pieces: substituting t = |x - anchor| turns each into
    // int_0^inf t^k exp(-|d| t) dt = k! / |d|^(k+1).
    for (j, anchor, s) in [(0, points[0].z, -1.0), (r, points[r - 1].z, 1.0)] {
        let d_abs = geom.d[j].abs();
        let scale = (geom.d[j] * anchor + geom.e[j] - m).exp();
        let c = g.coeffs(anchor, s, geom.d[j], geom.e[j], g.sign(right_of(j)));
        let mut kfac_over_dpow = 1.0 / d_abs; // k! / |d|^(k+1)
        let mut acc = 0.0;
        for (k, ck) in c.iter().enumerate() {
            acc += ck * kfac_over_dpow;
            kfac_over_dpow *= (k + 1) as f64 / d_abs;
        }
        sum += scale * acc;
    }
    // Bounded pieces, anchored at the endpoint with the larger exponent so
    // the local slope is non-positive. Duplicate breakpoints produce
    // zero-width pieces with zero mass.
    for j in 1..r {
        let a = points[j - 1].z;
        let b = points[j].z;
        let w = b - a;
        if w <= 0.0 {
            continue;
        }
        let d = geom.d[j];
        let (anchor, s) = if d <= 0.0 { (a, 1.0) } else { (b, -1.0) };
        let scale = (d * anchor + geom.e[j] - m).exp();
        let jk = j_moments(-d.abs(), w);
        let c = g.coeffs(anchor, s, d, geom.e[j], g.sign(right_of(j)));
        sum += scale * (c[0] * jk[0] + c[1] * jk[1] + c[2] * jk[2] + c[3] * jk[3]);
    }
    (m, sum)
}
