//! The set T on the x-axis.
//!
//! A soft indicator f with values in [0,1] is built first so that the
//! tilted density φ(x−ε)(1−δf(x))/(1−ξ) has the standard Gaussian moments.
//! It is rounded cell by cell to a 0/1 function and the breakpoint flow then
//! shrinks that to a few intervals with the moments restored exactly.
//!
//! The clipped exponential plus Legendre correction only produces a valid
//! f for very small ε. Elsewhere the cell probabilities of the clipped
//! exponential are projected onto the moment constraints instead.

use crate::error::{Error, Result};
use crate::gauss::{
    gaussian_mass, gaussian_moment, legendre_monomial_integral, legendre_poly, legendre_series,
    shifted_gaussian_moment, shifted_incomplete_moments, solve_dense, solve_legendre_moment_system,
    std_normal_pdf, Interval, MomentVector,
};
use crate::piecewise::{IntervalUnion, TwoValuedPiecewise};
use crate::reduce::{reduce_breakpoints_traced, ReductionConfig, ReductionTrace};
use crate::SCHEMA_VERSION;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const MAX_SOFT_K: usize = 8;

/// Default rounding cell width.
pub const ROUND_STEP: f64 = 1e-3;
/// Half-width of the rounding grid; f̃ is 0 outside it.
pub const ROUND_EXTENT: f64 = 10.0;
/// Moment tolerance for a rounding attempt. The reduction removes the rest.
pub const ROUND_ETA: f64 = 5e-3;
pub const ROUND_ATTEMPTS: usize = 64;
const ROUND_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftParams {
    pub epsilon: f64,
    pub delta: f64,
    pub xi: f64,
    pub c: f64,
    pub k: usize,
}

impl SoftParams {
    pub fn new(epsilon: f64, k: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.25) {
            return Err(Error::Regime(format!(
                "epsilon must lie in (0, 0.25), got {epsilon}"
            )));
        }
        if !(1..=MAX_SOFT_K).contains(&k) {
            return Err(Error::Regime(format!(
                "k must lie in 1..={MAX_SOFT_K}, got {k}"
            )));
        }
        let delta = epsilon.sqrt();
        Ok(SoftParams {
            epsilon,
            delta,
            xi: delta * epsilon.powf(0.3),
            c: epsilon.sqrt(),
            k,
        })
    }

    /// Radius 1/ε^{2/11} inside which the tilted density must equal φ.
    pub fn region_radius(&self) -> f64 {
        self.epsilon.powf(-2.0 / 11.0)
    }

    /// Target mass ξ/δ = ε^0.3 of T under N(ε,1).
    pub fn t_mass(&self) -> f64 {
        self.xi / self.delta
    }

    /// Clip band [1−δ/2, 1−δε] for h.
    pub fn clip_band(&self) -> (f64, f64) {
        (1.0 - 0.5 * self.delta, 1.0 - self.delta * self.epsilon)
    }

    pub fn h_tilde(&self, x: f64) -> f64 {
        let e = self.epsilon;
        (0.5 * e * e - e * x).exp() * (1.0 - self.xi)
    }

    // Solves h̃(x) = v.
    fn h_tilde_inverse(&self, v: f64) -> f64 {
        let e = self.epsilon;
        (0.5 * e * e - (v / (1.0 - self.xi)).ln()) / e
    }

    /// E_{N(ε,1)}[x^t] − (1−ξ)E_{N(0,1)}[x^t]: what δ·f must carry.
    fn excess_moments(&self) -> Vec<f64> {
        (0..=self.k)
            .map(|t| {
                shifted_gaussian_moment(t, self.epsilon) - (1.0 - self.xi) * gaussian_moment(t)
            })
            .collect()
    }
}

/// f₁ = (1−h)/δ with h = h̃ clipped to the band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClippedExponential {
    pub params: SoftParams,
    /// h̃ sits at the top of the band left of this point.
    pub clip_lo: f64,
    /// h̃ sits at the bottom of the band right of this point.
    pub clip_hi: f64,
}

pub fn build_f1(params: SoftParams) -> Result<ClippedExponential> {
    let f1 = build_f1_lenient(params);
    let r = params.region_radius();
    if f1.clip_lo >= -r || f1.clip_hi <= r {
        return Err(Error::ClipRegime {
            radius: r,
            lo: f1.clip_lo,
            hi: f1.clip_hi,
        });
    }
    Ok(f1)
}

/// Same construction without the clip-location check.
pub fn build_f1_lenient(params: SoftParams) -> ClippedExponential {
    let (lo, hi) = params.clip_band();
    ClippedExponential {
        params,
        clip_lo: params.h_tilde_inverse(hi),
        clip_hi: params.h_tilde_inverse(lo),
    }
}

impl ClippedExponential {
    pub fn h(&self, x: f64) -> f64 {
        let (lo, hi) = self.params.clip_band();
        if x <= self.clip_lo {
            hi
        } else if x >= self.clip_hi {
            lo
        } else {
            self.params.h_tilde(x)
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        (1.0 - self.h(x)) / self.params.delta
    }

    /// φ(x−ε)(1−δf₁(x))/(1−ξ).
    pub fn tilted_density(&self, x: f64) -> f64 {
        std_normal_pdf(x - self.params.epsilon) * self.h(x) / (1.0 - self.params.xi)
    }

    fn regions(&self) -> [Interval; 3] {
        [
            Interval {
                lo: f64::NEG_INFINITY,
                hi: self.clip_lo,
            },
            Interval {
                lo: self.clip_lo,
                hi: self.clip_hi,
            },
            Interval {
                lo: self.clip_hi,
                hi: f64::INFINITY,
            },
        ]
    }

    /// ∫ x^t P_{f₁}(x) dx − E_{N(0,1)}[x^t] for t = 0..=k.
    ///
    /// On the middle region the tilted density is φ itself, so only the two
    /// clipped tails contribute; summing them directly avoids cancelling
    /// against the full Gaussian moment.
    pub fn discrepancies(&self) -> Result<MomentVector> {
        let p = &self.params;
        let (lo, hi) = p.clip_band();
        let [left, _, right] = self.regions();
        let k = p.k;
        let le = shifted_incomplete_moments(k, p.epsilon, left)?;
        let l0 = shifted_incomplete_moments(k, 0.0, left)?;
        let re = shifted_incomplete_moments(k, p.epsilon, right)?;
        let r0 = shifted_incomplete_moments(k, 0.0, right)?;
        let s = 1.0 - p.xi;
        MomentVector::new(
            (0..=k)
                .map(|t| (hi / s * le[t] - l0[t]) + (lo / s * re[t] - r0[t]))
                .collect(),
        )
    }

    /// ∫_lo^hi φ(x−ε) h(x) dx.
    fn h_weighted_mass(&self, lo: f64, hi: f64) -> f64 {
        let p = &self.params;
        let (blo, bhi) = p.clip_band();
        let e = p.epsilon;
        let mut total = 0.0;
        let [left, mid, right] = self.regions();
        for (iv, w, sh) in [(left, bhi, e), (mid, 1.0 - p.xi, 0.0), (right, blo, e)] {
            let (a, b) = (lo.max(iv.lo), hi.min(iv.hi));
            if a < b {
                total += w * gaussian_mass(a - sh, b - sh);
            }
        }
        total
    }

    /// ∫_lo^hi φ(x−ε) f₁(x) dx.
    pub fn cell_integral(&self, lo: f64, hi: f64) -> f64 {
        let e = self.params.epsilon;
        (gaussian_mass(lo - e, hi - e) - self.h_weighted_mass(lo, hi)) / self.params.delta
    }
}

pub fn moment_discrepancy(f1: &ClippedExponential, t: usize) -> Result<f64> {
    if t > f1.params.k {
        return Err(Error::DegreeOutOfRange {
            degree: t,
            max: f1.params.k,
        });
    }
    Ok(f1.discrepancies()?.values()[t])
}

/// Legendre coefficients of p with ∫_{−C}^{C} x^t p = discrepancies[t],
/// rejected when Σ|a_i| ≥ δε/3 since then |f₂| ≤ ε is no longer guaranteed.
pub fn build_correction(params: SoftParams, discrepancies: &MomentVector) -> Result<Vec<f64>> {
    let a = legendre_correction(params, discrepancies)?;
    let sum: f64 = a.iter().map(|x| x.abs()).sum();
    let limit = params.delta * params.epsilon / 3.0;
    if sum >= limit {
        return Err(Error::CoefficientBlowup { sum, limit });
    }
    Ok(a)
}

/// The correction solve alone, with no size check.
pub fn legendre_correction(params: SoftParams, discrepancies: &MomentVector) -> Result<Vec<f64>> {
    if discrepancies.degree() != params.k {
        return Err(Error::InvalidArgument(format!(
            "expected {} discrepancies, got {}",
            params.k + 1,
            discrepancies.len()
        )));
    }
    solve_legendre_moment_system(params.c, params.k, discrepancies.values())
}

// ∫_a^b P_i(x/C) dx, from (2i+1)P_i = P'_{i+1} − P'_{i−1}.
fn legendre_integral(i: usize, c: f64, a: f64, b: f64) -> f64 {
    let anti = |u: f64| {
        if i == 0 {
            u
        } else {
            (legendre_poly(i + 1, u) - legendre_poly(i - 1, u)) / (2 * i + 1) as f64
        }
    };
    c * (anti(b / c) - anti(a / c))
}

/// f = f₁ + f₂ with f₂(x) = (1−ξ)/δ · p(x)/φ(x−ε) on [−C, C].
#[derive(Clone, Debug, PartialEq)]
pub struct SoftIndicator {
    pub params: SoftParams,
    pub f1: ClippedExponential,
    pub coeffs: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SoftCertificate {
    pub f_min: f64,
    pub f_min_at: f64,
    pub f_max: f64,
    pub f_max_at: f64,
    pub f2_max: f64,
    pub z: f64,
    pub z_error: f64,
    pub moment_residuals: Vec<f64>,
}

impl SoftIndicator {
    pub fn p(&self, x: f64) -> f64 {
        if x.abs() <= self.params.c {
            legendre_series(&self.coeffs, self.params.c, x)
        } else {
            0.0
        }
    }

    pub fn f2(&self, x: f64) -> f64 {
        let p = &self.params;
        if x.abs() <= p.c {
            (1.0 - p.xi) / p.delta * self.p(x) / std_normal_pdf(x - p.epsilon)
        } else {
            0.0
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.f1.value(x) + self.f2(x)
    }

    fn p_moments(&self) -> Vec<f64> {
        let c = self.params.c;
        (0..=self.params.k)
            .map(|t| {
                self.coeffs
                    .iter()
                    .enumerate()
                    .map(|(i, a)| a * c.powi(t as i32 + 1) * legendre_monomial_integral(i, t))
                    .sum()
            })
            .collect()
    }

    /// Z = ∫ φ(x−ε)(1−δf(x)) dx.
    pub fn normalizer(&self) -> f64 {
        let p = &self.params;
        self.f1.h_weighted_mass(f64::NEG_INFINITY, f64::INFINITY)
            - (1.0 - p.xi)
                * legendre_integral(0, p.c, -p.c, p.c)
                * self.coeffs.first().copied().unwrap_or(0.0)
    }

    /// ∫ x^t φ(x−ε)(1−δf(x)) dx / Z − E_{N(0,1)}[x^t] for t = 0..=k.
    pub fn moment_residuals(&self) -> Result<Vec<f64>> {
        let s = 1.0 - self.params.xi;
        let disc = self.f1.discrepancies()?;
        let pm = self.p_moments();
        let z = self.normalizer();
        // ∫x^t φ(x−ε)(1−δf) = (1−ξ)(m_t + d_t − ∫x^t p).
        Ok((0..=self.params.k)
            .map(|t| {
                let m = gaussian_moment(t);
                let raw = s * (m + (disc.values()[t] - pm[t]));
                raw / z - m
            })
            .collect())
    }

    /// Range of f over an n-point grid spanning both clip points and [−C, C],
    /// plus the analytic candidates: the clip points, ±C from either side,
    /// and the two constant tails.
    pub fn certificate(&self, n: usize) -> Result<SoftCertificate> {
        let p = &self.params;
        let lo = self.f1.clip_lo.min(-p.c) - 1.0;
        let hi = self.f1.clip_hi.max(p.c) + 1.0;
        let mut xs: Vec<f64> = (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect();
        xs.extend((0..n).map(|i| -p.c + 2.0 * p.c * i as f64 / (n - 1) as f64));
        let nudge = 1e-12 * p.c.max(1.0);
        xs.extend([
            self.f1.clip_lo,
            self.f1.clip_hi,
            -p.c - nudge,
            -p.c,
            p.c,
            p.c + nudge,
            -1e6,
            1e6,
        ]);
        let (mut f_min, mut f_min_at) = (f64::INFINITY, 0.0);
        let (mut f_max, mut f_max_at) = (f64::NEG_INFINITY, 0.0);
        let mut f2_max = 0.0f64;
        for &x in &xs {
            let v = self.value(x);
            if v < f_min {
                (f_min, f_min_at) = (v, x);
            }
            if v > f_max {
                (f_max, f_max_at) = (v, x);
            }
            f2_max = f2_max.max(self.f2(x).abs());
        }
        let z = self.normalizer();
        let moment_residuals = self.moment_residuals()?.iter().map(|r| r.abs()).collect();
        Ok(SoftCertificate {
            f_min,
            f_min_at,
            f_max,
            f_max_at,
            f2_max,
            z,
            z_error: (z - (1.0 - p.xi)).abs(),
            moment_residuals,
        })
    }
}

/// f₁ + f₂ from given parts, without checks.
pub fn compose_soft(f1: ClippedExponential, coeffs: Vec<f64>) -> SoftIndicator {
    SoftIndicator {
        params: f1.params,
        f1,
        coeffs,
    }
}

pub const SOFT_GRID_POINTS: usize = 100_000;

pub fn assemble_soft(params: SoftParams) -> Result<SoftIndicator> {
    let f1 = build_f1(params)?;
    let disc = f1.discrepancies()?;
    let coeffs = build_correction(params, &disc)?;
    let soft = compose_soft(f1, coeffs);
    let cert = soft.certificate(SOFT_GRID_POINTS)?;
    if cert.f_min < 0.0 {
        return Err(Error::RangeViolation {
            x: cert.f_min_at,
            value: cert.f_min,
        });
    }
    if cert.f_max > 1.0 {
        return Err(Error::RangeViolation {
            x: cert.f_max_at,
            value: cert.f_max,
        });
    }
    if cert.z_error > 1e-9 {
        return Err(Error::Certificate(format!(
            "normalizer off by {:e}",
            cert.z_error
        )));
    }
    if let Some(r) = cert.moment_residuals.iter().find(|r| **r > 1e-8) {
        return Err(Error::Certificate(format!("soft moment residual {r:e}")));
    }
    Ok(soft)
}

#[derive(Serialize, Deserialize)]
struct SoftIndicatorFile {
    schema_version: u32,
    epsilon: f64,
    k: usize,
    legendre_coeffs: Vec<f64>,
    clip_points: [f64; 2],
}

impl Serialize for SoftIndicator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SoftIndicatorFile {
            schema_version: SCHEMA_VERSION,
            epsilon: self.params.epsilon,
            k: self.params.k,
            legendre_coeffs: self.coeffs.clone(),
            clip_points: [self.f1.clip_lo, self.f1.clip_hi],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SoftIndicator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = SoftIndicatorFile::deserialize(d)?;
        let params = SoftParams::new(file.epsilon, file.k).map_err(D::Error::custom)?;
        if file.legendre_coeffs.len() != file.k + 1 {
            return Err(D::Error::custom("legendre_coeffs must have k+1 entries"));
        }
        Ok(compose_soft(build_f1_lenient(params), file.legendre_coeffs))
    }
}

/// Rounding grid: cells [is, (i+1)s] for −i_max ≤ i < i_max, each with the
/// probability of rounding to 1 and its moments under N(ε,1).
#[derive(Clone, Debug)]
pub struct CellGrid {
    pub params: SoftParams,
    pub step: f64,
    pub i_max: usize,
    probs: Vec<f64>,
    // Row-major (cell, t) moments ∫_cell x^t φ(x−ε) dx.
    moments: Vec<f64>,
}

impl CellGrid {
    pub fn new(params: SoftParams, step: f64, extent: f64) -> Result<Self> {
        if !(step > 0.0 && step <= 1e-2) {
            return Err(Error::InvalidArgument(format!(
                "cell width must lie in (0, 1e-2], got {step}"
            )));
        }
        let i_max = (extent / step).ceil() as usize;
        let n = 2 * i_max;
        let k = params.k;
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|c| {
                let lo = (c as f64 - i_max as f64) * step;
                shifted_incomplete_moments(k, params.epsilon, Interval { lo, hi: lo + step })
            })
            .collect::<Result<_>>()?;
        Ok(CellGrid {
            params,
            step,
            i_max,
            probs: vec![0.0; n],
            moments: rows.concat(),
        })
    }

    pub fn num_cells(&self) -> usize {
        2 * self.i_max
    }

    pub fn cell(&self, c: usize) -> Interval {
        let lo = (c as f64 - self.i_max as f64) * self.step;
        Interval {
            lo,
            hi: lo + self.step,
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn set_probs(&mut self, probs: Vec<f64>) -> Result<()> {
        if probs.len() != self.num_cells() {
            return Err(Error::InvalidArgument("one probability per cell".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!(
                "probability {p} outside [0,1]"
            )));
        }
        self.probs = probs;
        Ok(())
    }

    fn cell_moments(&self, c: usize) -> &[f64] {
        let w = self.params.k + 1;
        &self.moments[c * w..(c + 1) * w]
    }

    /// Σ_cells weight(c)·∫_cell x^t φ(x−ε) for t = 0..=k.
    fn weighted_sum(&self, weight: impl Fn(usize) -> f64) -> Vec<f64> {
        let w = self.params.k + 1;
        let mut out = vec![0.0; w];
        for c in 0..self.num_cells() {
            let a = weight(c);
            if a != 0.0 {
                for (o, m) in out.iter_mut().zip(self.cell_moments(c)) {
                    *o += a * m;
                }
            }
        }
        out
    }

    /// |E[x^t(1−δg)]/Z_g − E_{N(0,1)}[x^t]| for the cell weights g, and the
    /// mass of g under N(ε,1).
    fn residuals(&self, weight: impl Fn(usize) -> f64) -> (Vec<f64>, f64) {
        let p = &self.params;
        let on = self.weighted_sum(weight);
        let z = 1.0 - p.delta * on[0];
        let r = (0..=p.k)
            .map(|t| {
                let raw = shifted_gaussian_moment(t, p.epsilon) - p.delta * on[t];
                (raw / z - gaussian_moment(t)).abs()
            })
            .collect();
        (r, on[0])
    }

    /// Residuals of the fractional function itself.
    pub fn fractional_residuals(&self) -> Vec<f64> {
        self.residuals(|c| self.probs[c]).0
    }
}

/// Cell averages of f under N(ε,1), computed exactly region by region.
pub fn cell_probabilities(soft: &SoftIndicator, step: f64) -> Result<CellGrid> {
    let mut grid = CellGrid::new(soft.params, step, ROUND_EXTENT)?;
    let p = soft.params;
    let probs = (0..grid.num_cells())
        .map(|c| {
            let iv = grid.cell(c);
            let mass = grid.cell_moments(c)[0];
            let mut num = soft.f1.cell_integral(iv.lo, iv.hi);
            let (a, b) = (iv.lo.max(-p.c), iv.hi.min(p.c));
            if a < b {
                let pint: f64 = soft
                    .coeffs
                    .iter()
                    .enumerate()
                    .map(|(i, ai)| ai * legendre_integral(i, p.c, a, b))
                    .sum();
                num += (1.0 - p.xi) / p.delta * pint;
            }
            (num / mass).clamp(0.0, 1.0)
        })
        .collect();
    grid.set_probs(probs)?;
    Ok(grid)
}

#[derive(Clone, Debug, Serialize)]
pub struct ProjectionSummary {
    pub iterations: usize,
    pub residual: f64,
    pub active_cells: usize,
    /// Σ_c mass_c |p_c − p⁰_c|: how far the projection moved the probabilities.
    pub displacement: f64,
}

const PROJECTION_TOL: f64 = 1e-14;
const PROJECTION_MAX_ITER: usize = 200;

/// Weighted least-squares projection of the cell probabilities onto
/// {p ∈ [0,1]^cells : δ Σ p_c ∫_c x^t φ(x−ε) = E_{N(ε,1)}[x^t] − (1−ξ)m_t}.
///
/// The minimizer is p_c = clip(p⁰_c + Σ_t λ_t x̄_{c,t}) with x̄ the cell's
/// conditional moments; λ is found by semismooth Newton with backtracking.
pub fn project_cells(grid: &mut CellGrid) -> Result<ProjectionSummary> {
    let p = grid.params;
    let w = p.k + 1;
    let b = p.excess_moments();
    let p0 = grid.probs.clone();
    let n = grid.num_cells();
    let cond: Vec<f64> = (0..n)
        .flat_map(|c| {
            let m = grid.cell_moments(c);
            let mass = m[0];
            m.iter().map(move |v| v / mass).collect::<Vec<_>>()
        })
        .collect();
    let eval = |lam: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let probs: Vec<f64> = (0..n)
            .map(|c| {
                let shift: f64 = (0..w).map(|t| lam[t] * cond[c * w + t]).sum();
                (p0[c] + shift).clamp(0.0, 1.0)
            })
            .collect();
        let mut f = vec![0.0; w];
        for c in 0..n {
            for t in 0..w {
                f[t] += p.delta * probs[c] * grid.moments[c * w + t];
            }
        }
        for t in 0..w {
            f[t] -= b[t];
        }
        (probs, f)
    };
    let norm = |f: &[f64]| f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut lam = vec![0.0; w];
    let (mut probs, mut f) = eval(&lam);
    let mut iterations = 0;
    while norm(&f) > PROJECTION_TOL {
        if iterations >= PROJECTION_MAX_ITER {
            return Err(Error::Certificate(format!(
                "cell projection stalled at residual {:e}",
                norm(&f)
            )));
        }
        iterations += 1;
        let mut jac = vec![0.0; w * w];
        for c in 0..n {
            if probs[c] > 0.0 && probs[c] < 1.0 {
                let mass = grid.moments[c * w];
                for t in 0..w {
                    for s in 0..w {
                        jac[t * w + s] += p.delta * mass * cond[c * w + t] * cond[c * w + s];
                    }
                }
            }
        }
        // Levenberg damping keeps the step defined when the active set
        // momentarily loses rank.
        let scale = (0..w)
            .map(|t| jac[t * w + t])
            .fold(0.0f64, f64::max)
            .max(1e-300);
        let mut mu = 0.0;
        let step = loop {
            let mut damped = jac.clone();
            for t in 0..w {
                damped[t * w + t] += mu * scale + if mu > 0.0 { 1e-30 } else { 0.0 };
            }
            match solve_dense(damped, f.iter().map(|v| -v).collect()) {
                Ok(d) => break d,
                Err(_) if mu < 1e6 => mu = if mu == 0.0 { 1e-12 } else { mu * 100.0 },
                Err(e) => return Err(e),
            }
        };
        let mut alpha = 1.0;
        let current = norm(&f);
        loop {
            let trial: Vec<f64> = lam.iter().zip(&step).map(|(l, d)| l + alpha * d).collect();
            let (tp, tf) = eval(&trial);
            if norm(&tf) < current || alpha < 1e-10 {
                lam = trial;
                probs = tp;
                f = tf;
                break;
            }
            alpha *= 0.5;
        }
        if alpha < 1e-10 && norm(&f) >= current {
            // The dual has stopped improving: no [0,1]-valued cell function
            // meets the constraints.
            return Err(Error::Regime(format!(
                "moment constraints infeasible for f in [0,1] at epsilon {}, k {} (residual {current:e})",
                p.epsilon, p.k
            )));
        }
    }
    let active_cells = probs.iter().filter(|v| **v > 0.0 && **v < 1.0).count();
    let displacement = (0..n)
        .map(|c| grid.moments[c * w] * (probs[c] - p0[c]).abs())
        .sum();
    grid.probs = probs;
    Ok(ProjectionSummary {
        iterations,
        residual: norm(&f),
        active_cells,
        displacement,
    })
}

/// Cell probabilities of f₁ alone, projected onto the moment constraints.
pub fn projected_cells(params: SoftParams, step: f64) -> Result<(CellGrid, ProjectionSummary)> {
    let f1 = build_f1_lenient(params);
    let soft = compose_soft(f1, vec![0.0; params.k + 1]);
    let mut grid = cell_probabilities(&soft, step)?;
    let summary = project_cells(&mut grid)?;
    Ok((grid, summary))
}

/// One rounding draw: cell c is 1 with probability p_c. The stream is keyed
/// by (seed, attempt).
pub fn round_cells(grid: &CellGrid, seed: u64, attempt: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt);
    grid.probs
        .iter()
        .map(|&p| {
            let u: f64 = rng.random();
            u < p
        })
        .collect()
}

/// 0/1 piecewise function equal to the rounded cells on the grid and 0
/// outside it.
pub fn cells_to_piecewise(grid: &CellGrid, bits: &[bool]) -> Result<TwoValuedPiecewise> {
    let mut bps = Vec::new();
    let mut state = false;
    for (c, &b) in bits.iter().enumerate() {
        if b != state {
            bps.push(grid.cell(c).lo);
            state = b;
        }
    }
    if state {
        bps.push(grid.cell(bits.len() - 1).hi);
    }
    TwoValuedPiecewise::new(bps, 0.0, 1.0, false)
}

#[derive(Clone, Debug)]
pub struct RoundingOutcome {
    pub function: TwoValuedPiecewise,
    pub attempt: usize,
    pub residuals: Vec<f64>,
    /// Pr_{N(ε,1)}[f̃ = 1].
    pub mass: f64,
}

/// Rounds until the moment residuals are at most η and the rounded mass is
/// at most twice ε^0.3. Attempts run in parallel batches; the lowest passing
/// attempt index wins, so the result does not depend on scheduling.
pub fn randomized_round(grid: &CellGrid, eta: f64, seed: u64) -> Result<RoundingOutcome> {
    if !(eta >= 1e-6) {
        return Err(Error::InvalidArgument(format!(
            "rounding tolerance must be at least 1e-6, got {eta}"
        )));
    }
    let cap = 2.0 * grid.params.t_mass();
    let mut best = f64::INFINITY;
    for start in (0..ROUND_ATTEMPTS).step_by(ROUND_BATCH) {
        let batch: Vec<(usize, Vec<bool>, Vec<f64>, f64)> = (start..start + ROUND_BATCH)
            .into_par_iter()
            .map(|a| {
                let bits = round_cells(grid, seed, a as u64);
                let (r, mass) = grid.residuals(|c| if bits[c] { 1.0 } else { 0.0 });
                (a, bits, r, mass)
            })
            .collect();
        for (a, bits, r, mass) in batch {
            let worst = r.iter().fold(0.0f64, |m, v| m.max(*v));
            best = best.min(worst);
            if worst <= eta && mass <= cap {
                return Ok(RoundingOutcome {
                    function: cells_to_piecewise(grid, &bits)?,
                    attempt: a,
                    residuals: r,
                    mass,
                });
            }
        }
    }
    Err(Error::RetriesExhausted {
        attempts: ROUND_ATTEMPTS,
        best,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftRoute {
    /// Clipped exponential plus Legendre correction.
    Correction,
    /// Clipped exponential cells projected onto the constraints.
    Projection,
}

#[derive(Clone, Debug, Serialize)]
pub struct TBuild {
    pub set: IntervalUnion,
    pub z: f64,
    pub route: SoftRoute,
    /// Why the correction route was abandoned, if it was.
    pub correction_failure: Option<String>,
    pub rounding_attempt: usize,
    pub rounding_residual: f64,
    pub rounding_mass: f64,
    pub reduction: ReductionTrace,
    pub residuals: Vec<f64>,
    pub mass: f64,
    pub mass_error: f64,
}

/// T = {x : 1 − δ·1_T(x) = 1−δ}, with
/// ∫ x^t φ(x−ε)(1 − δ1_T(x)) dx / (1−ξ) = E_{N(0,1)}[x^t] for t = 0..=k.
pub fn build_set_t(params: SoftParams, eta: f64, seed: u64) -> Result<(IntervalUnion, f64)> {
    build_set_t_traced(params, eta, seed).map(|b| (b.set, b.z))
}

pub fn build_set_t_traced(params: SoftParams, eta: f64, seed: u64) -> Result<TBuild> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eta must be positive, got {eta}"
        )));
    }
    let (grid, route, correction_failure) = match assemble_soft(params) {
        Ok(soft) => (
            cell_probabilities(&soft, ROUND_STEP).map_err(|e| e.in_stage("cell probabilities"))?,
            SoftRoute::Correction,
            None,
        ),
        Err(
            e @ (Error::ClipRegime { .. }
            | Error::CoefficientBlowup { .. }
            | Error::RangeViolation { .. }
            | Error::IllConditioned { .. }
            | Error::Certificate(_)
            | Error::Regime(_)),
        ) => {
            let (grid, _) =
                projected_cells(params, ROUND_STEP).map_err(|e| e.in_stage("cell projection"))?;
            (grid, SoftRoute::Projection, Some(e.to_string()))
        }
        Err(e) => return Err(e.in_stage("soft indicator")),
    };
    let rounded =
        randomized_round(&grid, ROUND_ETA, seed).map_err(|e| e.in_stage("randomized rounding"))?;
    let f = rounded.function;
    // 1 − δf̃: rounded-up cells carry the low value 1−δ.
    let g0 = TwoValuedPiecewise::new(
        f.breakpoints().to_vec(),
        1.0 - params.delta,
        1.0,
        !f.leading_high(),
    )?;
    let nu = MomentVector::gaussian(params.k, 1.0 - params.xi);
    let mut cfg = ReductionConfig::new(nu);
    cfg.tail_value = Some(true);
    let (g, reduction) = reduce_breakpoints_traced(&g0, &cfg, params.epsilon)
        .map_err(|e| e.in_stage("breakpoint reduction"))?;
    let set = g.low_set()?;
    let z = 1.0 - params.xi;
    let residuals = marginal_x_residuals(&set, params, z)?;
    let mass = set.mass(params.epsilon);
    let mass_error = (mass - params.t_mass()).abs();
    if let Some(r) = residuals.iter().find(|r| **r > eta) {
        return Err(Error::Certificate(format!("marginal-x residual {r:e}")));
    }
    if mass_error > 1e-6 {
        return Err(Error::Certificate(format!(
            "mass of T off by {mass_error:e}"
        )));
    }
    if set.len() > params.k + 1 {
        return Err(Error::Certificate(format!(
            "T has {} intervals, more than k+1 = {}",
            set.len(),
            params.k + 1
        )));
    }
    Ok(TBuild {
        set,
        z,
        route,
        correction_failure,
        rounding_attempt: rounded.attempt,
        rounding_residual: rounded.residuals.iter().fold(0.0, |m, v| m.max(*v)),
        rounding_mass: rounded.mass,
        reduction,
        residuals,
        mass,
        mass_error,
    })
}

/// |∫ x^t φ(x−ε)(1 − δ1_T(x)) dx / Z − E_{N(0,1)}[x^t]| for t = 0..=k.
pub fn marginal_x_residuals(t_set: &IntervalUnion, params: SoftParams, z: f64) -> Result<Vec<f64>> {
    let inside = t_set.moments(params.k, params.epsilon)?;
    Ok((0..=params.k)
        .map(|t| {
            let raw = shifted_gaussian_moment(t, params.epsilon) - params.delta * inside[t];
            (raw / z - gaussian_moment(t)).abs()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn composite_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn params_derived_exactly() {
        let p = SoftParams::new(0.05, 3).unwrap();
        assert_eq!(p.delta, 0.05f64.sqrt());
        assert!((p.xi - 0.05f64.powf(0.8)).abs() < 1e-15);
        assert!((p.t_mass() - 0.05f64.powf(0.3)).abs() < 1e-14);
        assert!(SoftParams::new(0.3, 3).is_err());
        assert!(SoftParams::new(0.05, 0).is_err());
    }

    #[test]
    fn tilted_density_is_gaussian_between_clips() {
        let p = SoftParams::new(1e-3, 3).unwrap();
        let f1 = build_f1(p).unwrap();
        let r = p.region_radius();
        for i in 0..10_000 {
            let x = -r + 2.0 * r * i as f64 / 9999.0;
            assert!(
                (f1.tilted_density(x) - std_normal_pdf(x)).abs() <= 1e-12,
                "x = {x}"
            );
        }
    }

    #[test]
    fn f1_monotone_and_bounded() {
        for eps in [0.05, 0.02, 1e-3] {
            let f1 = build_f1_lenient(SoftParams::new(eps, 3).unwrap());
            let mut prev = f64::NEG_INFINITY;
            for i in 0..4001 {
                let x = -20.0 + 40.0 * i as f64 / 4000.0;
                let v = f1.value(x);
                assert!(v >= prev - 1e-15);
                assert!(v >= eps - 1e-12 && v <= 0.5 + 1e-12);
                prev = v;
            }
        }
    }

    // Clip points from bisection on h̃ against the band ends.
    #[test]
    fn clip_points_match_bisection() {
        let p = SoftParams::new(0.05, 3).unwrap();
        let f1 = build_f1_lenient(p);
        let (lo, hi) = p.clip_band();
        for (target, got) in [(hi, f1.clip_lo), (lo, f1.clip_hi)] {
            let (mut a, mut b) = (-50.0, 50.0);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if p.h_tilde(m) > target {
                    a = m;
                } else {
                    b = m;
                }
            }
            assert!((0.5 * (a + b) - got).abs() < 1e-10);
        }
        // At ε = 0.05 the clipping starts well inside 1/ε^{2/11} ≈ 1.72.
        assert!(f1.clip_lo > -1.72 && f1.clip_hi < 1.72);
        assert!(matches!(build_f1(p), Err(Error::ClipRegime { .. })));
    }

    #[test]
    fn discrepancy_matches_quadrature() {
        for eps in [0.05, 0.02] {
            let p = SoftParams::new(eps, 3).unwrap();
            let f1 = build_f1_lenient(p);
            let d = f1.discrepancies().unwrap();
            for t in 0..=3 {
                let g = |x: f64| x.powi(t as i32) * (f1.tilted_density(x) - std_normal_pdf(x));
                let q = composite_simpson(g, -14.0, f1.clip_lo, 40_000)
                    + composite_simpson(g, f1.clip_lo, f1.clip_hi, 40_000)
                    + composite_simpson(g, f1.clip_hi, 14.0, 40_000);
                assert!(
                    (q - d.values()[t]).abs() < 1e-11,
                    "eps {eps} t {t}: {q} vs {}",
                    d.values()[t]
                );
            }
        }
    }

    #[test]
    fn zero_discrepancy_zero_correction() {
        let p = SoftParams::new(0.05, 3).unwrap();
        let a = build_correction(p, &MomentVector::zeros(3)).unwrap();
        assert!(a.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn correction_blowup_detected_at_moderate_epsilon() {
        let p = SoftParams::new(0.05, 3).unwrap();
        let d = build_f1_lenient(p).discrepancies().unwrap();
        assert!(matches!(
            build_correction(p, &d),
            Err(Error::CoefficientBlowup { .. })
        ));
    }

    #[test]
    fn correction_reintegrates() {
        let p = SoftParams::new(0.05, 3).unwrap();
        let d = build_f1_lenient(p).discrepancies().unwrap();
        let a = legendre_correction(p, &d).unwrap();
        let soft = compose_soft(build_f1_lenient(p), a);
        for t in 0..=3 {
            let q = composite_simpson(|x| x.powi(t as i32) * soft.p(x), -p.c, p.c, 20_000);
            assert!((q - d.values()[t]).abs() <= 1e-9 * d.values()[t].abs().max(1e-12));
        }
    }

    #[test]
    fn soft_set_at_tiny_epsilon() {
        let p = SoftParams::new(1e-5, 3).unwrap();
        let soft = assemble_soft(p).unwrap();
        let cert = soft.certificate(SOFT_GRID_POINTS).unwrap();
        assert!(cert.f_min >= 0.0 && cert.f_max <= 1.0);
        assert!(cert.z_error <= 1e-10);
        assert!(cert.moment_residuals.iter().all(|r| *r <= 1e-8));
        assert!(cert.f2_max <= p.epsilon);
        let json = serde_json::to_string(&soft).unwrap();
        assert!(json.contains("\"schema_version\""));
        let back: SoftIndicator = serde_json::from_str(&json).unwrap();
        assert_eq!(back, soft);
    }

    #[test]
    fn rounding_trivial_cells() {
        let p = SoftParams::new(0.05, 2).unwrap();
        let mut grid = CellGrid::new(p, 1e-2, 2.0).unwrap();
        assert!(round_cells(&grid, 7, 0).iter().all(|b| !b));
        let f = cells_to_piecewise(&grid, &round_cells(&grid, 7, 0)).unwrap();
        assert!(f.breakpoints().is_empty() && !f.leading_high());
        let mut probs = vec![0.0; grid.num_cells()];
        probs[10] = 1.0;
        grid.set_probs(probs).unwrap();
        for seed in 0..20 {
            let bits = round_cells(&grid, seed, 0);
            assert!(bits[10] && bits.iter().filter(|b| **b).count() == 1);
        }
    }

    #[test]
    fn rounding_unbiased_per_cell() {
        let p = SoftParams::new(0.05, 3).unwrap();
        let (grid, _) = projected_cells(p, 1e-2).unwrap();
        let n = 1000;
        let mut counts = vec![0usize; grid.num_cells()];
        for seed in 0..n {
            for (c, b) in round_cells(&grid, seed, 0).iter().enumerate() {
                counts[c] += *b as usize;
            }
        }
        for (c, &k) in counts.iter().enumerate() {
            let q = grid.probs()[c];
            let se = (q * (1.0 - q) / n as f64).sqrt();
            assert!(
                (k as f64 / n as f64 - q).abs() <= 4.0 * se + 1e-12,
                "cell {c}"
            );
        }
    }

    #[test]
    fn projection_hits_constraints() {
        for eps in [0.05, 0.02] {
            let p = SoftParams::new(eps, 3).unwrap();
            let (grid, summary) = projected_cells(p, 1e-3).unwrap();
            assert!(summary.residual <= 1e-13);
            assert!(grid.fractional_residuals().iter().all(|r| *r <= 1e-12));
            assert!(grid.probs().iter().all(|q| (0.0..=1.0).contains(q)));
        }
    }

    #[test]
    fn set_t_certificates() {
        let p = SoftParams::new(0.05, 3).unwrap();
        let b = build_set_t_traced(p, 1e-6, 1).unwrap();
        assert_eq!(b.route, SoftRoute::Projection);
        assert!(b.residuals.iter().all(|r| *r <= 1e-6));
        assert!(b.mass_error <= 1e-6);
        assert!(b.set.len() <= p.k + 1);
        // Rebuilt from the set alone.
        let again = marginal_x_residuals(&b.set, p, 1.0 - p.xi).unwrap();
        assert_eq!(again, b.residuals);
        let (t2, _) = build_set_t(p, 1e-6, 1).unwrap();
        assert_eq!(t2, b.set);
    }

    #[test]
    fn infeasible_regime_reported() {
        let p = SoftParams::new(0.1, 3).unwrap();
        assert!(matches!(
            projected_cells(p, 1e-3).map(|_| ()),
            Err(Error::Regime(_))
        ));
    }

    #[test]
    fn set_t_small_epsilon() {
        let p = SoftParams::new(1e-4, 3).unwrap();
        let b = build_set_t_traced(p, 1e-8, 3).unwrap();
        assert!(b.residuals.iter().all(|r| *r <= 1e-8));
    }
}
