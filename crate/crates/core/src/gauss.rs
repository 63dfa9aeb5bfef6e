//! Scalar Gaussian numerics: density, CDF, incomplete moments, Legendre and
//! Hermite polynomials, and the small dense solves used by the constructions.

use crate::error::{Error, Result};
use std::f64::consts::FRAC_1_SQRT_2;

/// Highest degree accepted by the incomplete-moment recurrence. Each step of
/// the recurrence multiplies rounding error by at most `t`, so beyond this the
/// boundary terms cancel catastrophically for intervals near the origin.
pub const MAX_DEGREE: usize = 64;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
            return Err(Error::InvalidInterval { lo, hi });
        }
        Ok(Interval { lo, hi })
    }

    pub fn real_line() -> Self {
        Interval {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Mass of the interval under N(shift, 1).
    pub fn gaussian_mass(&self, shift: f64) -> f64 {
        gaussian_mass(self.lo - shift, self.hi - shift)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentVector {
    values: Vec<f64>,
}

impl MomentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(
                "moment vector needs at least one entry".into(),
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite moment {v}")));
        }
        Ok(MomentVector { values })
    }

    pub fn zeros(k: usize) -> Self {
        MomentVector {
            values: vec![0.0; k + 1],
        }
    }

    /// Moments of N(0,1) up to degree k, optionally scaled.
    pub fn gaussian(k: usize, scale: f64) -> Self {
        MomentVector {
            values: (0..=k).map(|t| scale * gaussian_moment(t)).collect(),
        }
    }

    pub fn degree(&self) -> usize {
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn std_normal_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Φ(x) = erfc(−x/√2)/2. `libm::erfc` is the fdlibm rational/exponential
/// approximation (Sun Microsystems, error below 1 ulp), so the absolute error
/// here is dominated by rounding of the argument and stays far below 1e−14.
pub fn std_normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail 1 − Φ(x), accurate for large positive x.
pub fn std_normal_sf(x: f64) -> f64 {
    std_normal_cdf(-x)
}

/// Φ(b) − Φ(a) without cancellation when both endpoints sit in one tail.
pub fn gaussian_mass(a: f64, b: f64) -> f64 {
    if a >= b {
        return 0.0;
    }
    if a >= 0.0 {
        std_normal_sf(a) - std_normal_sf(b)
    } else if b <= 0.0 {
        std_normal_cdf(b) - std_normal_cdf(a)
    } else {
        1.0 - std_normal_cdf(a) - std_normal_sf(b)
    }
}

/// E[z^t] for z ~ N(0,1): (t−1)!! for even t, 0 for odd t.
pub fn gaussian_moment(t: usize) -> f64 {
    if t % 2 == 1 {
        return 0.0;
    }
    (1..t).step_by(2).map(|j| j as f64).product()
}

/// E[x^t] for x ~ N(c,1).
pub fn shifted_gaussian_moment(t: usize, c: f64) -> f64 {
    (0..=t)
        .step_by(2)
        .map(|j| binomial(t, j) * c.powi((t - j) as i32) * gaussian_moment(j))
        .sum()
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r.round()
}

fn check_degree(t: usize) -> Result<()> {
    if t > MAX_DEGREE {
        Err(Error::DegreeOutOfRange {
            degree: t,
            max: MAX_DEGREE,
        })
    } else {
        Ok(())
    }
}

// x^p φ(x), treating infinite or underflowed endpoints as contributing nothing.
fn boundary_term(x: f64, p: usize) -> f64 {
    let phi = std_normal_pdf(x);
    if phi == 0.0 {
        0.0
    } else {
        x.powi(p as i32) * phi
    }
}

/// M_0..M_tmax with M_t = ∫_a^b z^t φ(z) dz.
///
/// The recurrence is exact up to rounding, but on short finite intervals its
/// boundary terms nearly cancel. A running bound on the rounding error is
/// kept alongside, and any entry whose bound exceeds 1e−12 relative is
/// recomputed by composite Gauss–Legendre quadrature instead.
pub fn incomplete_moments(tmax: usize, iv: Interval) -> Result<Vec<f64>> {
    check_degree(tmax)?;
    let (a, b) = (iv.lo, iv.hi);
    let eps = f64::EPSILON;
    let mut m = Vec::with_capacity(tmax + 1);
    let mut err = Vec::with_capacity(tmax + 1);
    let m0 = gaussian_mass(a, b);
    m.push(m0);
    err.push(2.0 * eps * (m0 + 1e-300));
    if tmax >= 1 {
        let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
        m.push(pa - pb);
        err.push(2.0 * eps * (pa + pb));
    }
    for t in 2..=tmax {
        let (ba, bb) = (boundary_term(a, t - 1), boundary_term(b, t - 1));
        let carried = (t - 1) as f64 * m[t - 2];
        let v = carried + ba - bb;
        m.push(v);
        err.push((t - 1) as f64 * err[t - 2] + 2.0 * eps * (carried.abs() + ba.abs() + bb.abs()));
    }
    if a.is_finite() && b.is_finite() && (0..=tmax).any(|t| err[t] > 1e-12 * m[t].abs()) {
        let q = gauss_legendre_moments(tmax, a, b);
        for t in 0..=tmax {
            if err[t] > 1e-12 * m[t].abs() {
                m[t] = q[t];
            }
        }
    }
    Ok(m)
}

const GL_ORDER: usize = 16;

fn gauss_legendre_rule() -> &'static [(f64, f64); GL_ORDER] {
    static RULE: std::sync::OnceLock<[(f64, f64); GL_ORDER]> = std::sync::OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_ORDER;
        let mut rule = [(0.0, 0.0); GL_ORDER];
        for (i, slot) in rule.iter_mut().enumerate() {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let p = legendre_poly(n, x);
                dp = n as f64 * (x * p - legendre_poly(n - 1, x)) / (x * x - 1.0);
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            *slot = (x, 2.0 / ((1.0 - x * x) * dp * dp));
        }
        rule
    })
}

// Composite 16-point Gauss–Legendre on panels no wider than 0.25.
fn gauss_legendre_moments(tmax: usize, a: f64, b: f64) -> Vec<f64> {
    let rule = gauss_legendre_rule();
    let panels = ((b - a) / 0.25).ceil().max(1.0) as usize;
    let h = (b - a) / panels as f64;
    let mut out = vec![0.0; tmax + 1];
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        for &(x, w) in rule.iter() {
            let z = mid + 0.5 * h * x;
            let mut v = 0.5 * h * w * std_normal_pdf(z);
            for o in out.iter_mut() {
                *o += v;
                v *= z;
            }
        }
    }
    out
}

pub fn incomplete_moment(t: usize, iv: Interval) -> Result<f64> {
    Ok(incomplete_moments(t, iv)?[t])
}

/// ∫_a^b x^t φ(x − shift) dx for t = 0..=tmax, by substituting x = z + shift.
pub fn shifted_incomplete_moments(tmax: usize, shift: f64, iv: Interval) -> Result<Vec<f64>> {
    let z = Interval {
        lo: iv.lo - shift,
        hi: iv.hi - shift,
    };
    let m = incomplete_moments(tmax, z)?;
    if shift == 0.0 {
        return Ok(m);
    }
    let mut powers = vec![1.0; tmax + 1];
    for j in 1..=tmax {
        powers[j] = powers[j - 1] * shift;
    }
    Ok((0..=tmax)
        .map(|t| (0..=t).map(|j| binomial(t, j) * powers[t - j] * m[j]).sum())
        .collect())
}

pub fn shifted_incomplete_moment(t: usize, shift: f64, iv: Interval) -> Result<f64> {
    Ok(shifted_incomplete_moments(t, shift, iv)?[t])
}

/// P_i(x) by Bonnet's recurrence. Arguments within 1e−12 of [−1,1] are clamped.
pub fn legendre_poly(i: usize, x: f64) -> f64 {
    let x = if x.abs() > 1.0 && x.abs() <= 1.0 + 1e-12 {
        x.signum()
    } else {
        x
    };
    if i == 0 {
        return 1.0;
    }
    let (mut p0, mut p1) = (1.0, x);
    for n in 1..i {
        let nf = n as f64;
        let p2 = ((2.0 * nf + 1.0) * x * p1 - nf * p0) / (nf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// ∫_{−1}^{1} u^t P_i(u) du, closed form
/// 2^{i+1} t! ((t+i)/2)! / (((t−i)/2)! (t+i+1)!) when t ≥ i and t−i is even.
pub fn legendre_monomial_integral(i: usize, t: usize) -> f64 {
    if t < i || (t - i) % 2 == 1 {
        return 0.0;
    }
    // Work in logs to stay finite for the larger degrees.
    let lf = |n: usize| -> f64 { (1..=n).map(|j| (j as f64).ln()).sum() };
    let log = (i as f64 + 1.0) * std::f64::consts::LN_2 + lf(t) + lf((t + i) / 2)
        - lf((t - i) / 2)
        - lf(t + i + 1);
    log.exp()
}

/// Probabilists' Hermite polynomial He_n(x).
pub fn hermite(n: usize, x: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let (mut h0, mut h1) = (1.0, x);
    for j in 1..n {
        let h2 = x * h1 - j as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// Monomial coefficients c with He_n(x) = Σ_j c_j x^j.
pub fn hermite_coeffs(n: usize) -> Vec<f64> {
    let mut prev = vec![1.0];
    if n == 0 {
        return prev;
    }
    let mut cur = vec![0.0, 1.0];
    for j in 1..n {
        let mut next = vec![0.0; j + 2];
        for (d, c) in cur.iter().enumerate() {
            next[d + 1] += c;
        }
        for (d, c) in prev.iter().enumerate() {
            next[d] -= j as f64 * c;
        }
        prev = cur;
        cur = next;
    }
    cur
}

/// Dense solve with full pivoting. `a` is row-major n×n.
pub fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n * n {
        return Err(Error::InvalidArgument(
            "matrix and right-hand side sizes differ".into(),
        ));
    }
    let mut col_perm: Vec<usize> = (0..n).collect();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for k in 0..n {
        let (mut pr, mut pc, mut best) = (k, k, -1.0);
        for r in k..n {
            for c in k..n {
                let v = a[r * n + c].abs();
                if v > best {
                    best = v;
                    pr = r;
                    pc = c;
                }
            }
        }
        if best == 0.0 || !best.is_finite() || best <= scale * 1e-300 {
            return Err(Error::IllConditioned {
                condition: f64::INFINITY,
            });
        }
        if pr != k {
            for c in 0..n {
                a.swap(k * n + c, pr * n + c);
            }
            b.swap(k, pr);
        }
        if pc != k {
            for r in 0..n {
                a.swap(r * n + k, r * n + pc);
            }
            col_perm.swap(k, pc);
        }
        let piv = a[k * n + k];
        for r in k + 1..n {
            let f = a[r * n + k] / piv;
            if f == 0.0 {
                continue;
            }
            a[r * n + k] = 0.0;
            for c in k + 1..n {
                a[r * n + c] -= f * a[k * n + c];
            }
            b[r] -= f * b[k];
        }
    }
    let mut y = vec![0.0; n];
    for k in (0..n).rev() {
        let mut s = b[k];
        for c in k + 1..n {
            s -= a[k * n + c] * y[c];
        }
        y[k] = s / a[k * n + k];
    }
    let mut x = vec![0.0; n];
    for (k, &c) in col_perm.iter().enumerate() {
        x[c] = y[k];
    }
    Ok(x)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves Σ_j nodes_j^i · weights_j · u_j = rhs_i for i = 0..n−1.
///
/// Fails with `NearSingular` naming the closest node pair when the nodes are
/// too close to separate, which callers treat as a collision.
pub fn solve_vandermonde_weighted(nodes: &[f64], weights: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = nodes.len();
    if weights.len() != n || rhs.len() != n {
        return Err(Error::InvalidArgument(
            "nodes, weights and rhs must have equal length".into(),
        ));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if weights.iter().any(|w| *w == 0.0 || !w.is_finite()) {
        return Err(Error::InvalidArgument(
            "weights must be finite and nonzero".into(),
        ));
    }
    let scale = nodes
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    let (mut first, mut second, mut gap) = (0, 0, f64::INFINITY);
    for i in 0..n {
        for j in i + 1..n {
            let g = (nodes[i] - nodes[j]).abs() / scale;
            if g < gap {
                gap = g;
                first = i;
                second = j;
            }
        }
    }
    if gap <= 1e-12 {
        return Err(Error::NearSingular { first, second, gap });
    }
    let mut a = vec![0.0; n * n];
    for j in 0..n {
        let mut p = weights[j];
        for i in 0..n {
            a[i * n + j] = p;
            p *= nodes[j];
        }
    }
    let rhs_norm = norm2(rhs);
    if rhs_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let u = solve_dense(a.clone(), rhs.to_vec()).map_err(|_| Error::NearSingular {
        first,
        second,
        gap,
    })?;
    let resid: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j] * u[j]).sum::<f64>() - rhs[i])
        .collect();
    if !(norm2(&resid) <= 1e-9 * rhs_norm) || u.iter().any(|x| !x.is_finite()) {
        return Err(Error::NearSingular { first, second, gap });
    }
    Ok(u)
}

/// 1-norm condition number of a small dense matrix via its explicit inverse.
pub fn condition_estimate(a: &[f64], n: usize) -> f64 {
    let norm1 = |m: &[f64]| -> f64 {
        (0..n)
            .map(|c| (0..n).map(|r| m[r * n + c].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let mut inv = vec![0.0; n * n];
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        match solve_dense(a.to_vec(), e) {
            Ok(col) => {
                for r in 0..n {
                    inv[r * n + c] = col[r];
                }
            }
            Err(_) => return f64::INFINITY,
        }
    }
    norm1(a) * norm1(&inv)
}

/// Legendre coefficients a_0..a_k of p(x) = Σ a_i P_i(x/C) with
/// ∫_{−C}^{C} x^t p(x) dx = discrepancies[t] for t = 0..k.
pub fn solve_legendre_moment_system(c: f64, k: usize, discrepancies: &[f64]) -> Result<Vec<f64>> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "half-width C must be positive, got {c}"
        )));
    }
    if discrepancies.len() != k + 1 {
        return Err(Error::InvalidArgument(format!(
            "expected {} discrepancies, got {}",
            k + 1,
            discrepancies.len()
        )));
    }
    check_degree(2 * k)?;
    let n = k + 1;
    // Row t is divided by C^{t+1}, which leaves a C-independent matrix.
    let mut g = vec![0.0; n * n];
    for t in 0..n {
        for i in 0..n {
            g[t * n + i] = legendre_monomial_integral(i, t);
        }
    }
    let rhs: Vec<f64> = (0..n)
        .map(|t| discrepancies[t] / c.powi(t as i32 + 1))
        .collect();
    let condition = condition_estimate(&g, n);
    if !(condition < 1e12) {
        return Err(Error::IllConditioned { condition });
    }
    if discrepancies.iter().all(|d| *d == 0.0) {
        return Ok(vec![0.0; n]);
    }
    let a = solve_dense(g, rhs)?;
    let scale = discrepancies.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    for (t, d) in discrepancies.iter().enumerate() {
        let back: f64 = (0..n)
            .map(|i| a[i] * c.powi(t as i32 + 1) * legendre_monomial_integral(i, t))
            .sum();
        if (back - d).abs() > 1e-9 * scale {
            return Err(Error::IllConditioned { condition });
        }
    }
    Ok(a)
}

/// Evaluates Σ a_i P_i(x/C).
pub fn legendre_series(coeffs: &[f64], c: f64, x: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .map(|(i, a)| a * legendre_poly(i, x / c))
        .sum()
}
