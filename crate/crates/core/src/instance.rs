//! The planar distribution A(x,y) ∝ φ(x−ε)φ(y)·1((x,y) ∉ T×U) and its
//! certificates.

use crate::error::{Error, Result};
use crate::gauss::{
    gaussian_moment, hermite_coeffs, shifted_gaussian_moment, std_normal_cdf, std_normal_pdf,
    Interval,
};
use crate::moment_match::build_set_u;
use crate::piecewise::IntervalUnion;
use crate::soft::{build_set_t, SoftParams};
use crate::SCHEMA_VERSION;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Tolerance on joint-moment residuals for t+s ≤ k.
pub const MOMENT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Instance2D {
    pub params: SoftParams,
    pub t_set: IntervalUnion,
    pub u_set: IntervalUnion,
    /// ∫ φ(x−ε)(1 − δ1_T(x)) dx, the mass of S under N((ε,0), I₂).
    pub z: f64,
    pub build_seed: u64,
}

pub fn assemble_instance(epsilon: f64, k: usize, seed: u64) -> Result<Instance2D> {
    if !(epsilon > 0.001 && epsilon <= 0.1) {
        return Err(Error::Regime(format!(
            "epsilon must lie in (0.001, 0.1], got {epsilon}"
        )));
    }
    if !(1..=4).contains(&k) {
        return Err(Error::Regime(format!("k must lie in 1..=4, got {k}")));
    }
    let params = SoftParams::new(epsilon, k)?;
    let u_set = build_set_u(params.delta, k).map_err(|e| e.in_stage("set U"))?;
    let (t_set, z_target) =
        build_set_t(params, MOMENT_TOL, seed).map_err(|e| e.in_stage("set T"))?;
    let inst = Instance2D::from_sets(params, t_set, u_set, seed)?;
    if (inst.z - z_target).abs() > 1e-6 {
        return Err(Error::Certificate(format!(
            "normalizer {} differs from 1 − ξ = {z_target}",
            inst.z
        )));
    }
    Ok(inst)
}

impl Instance2D {
    /// Instance from given sets; Z is recomputed from T and the product mass
    /// of T×U uses the measured mass of U.
    pub fn from_sets(
        params: SoftParams,
        t_set: IntervalUnion,
        u_set: IntervalUnion,
        build_seed: u64,
    ) -> Result<Self> {
        let z = 1.0 - t_set.mass(params.epsilon) * u_set.mass(0.0);
        if !(z >= 0.5) {
            return Err(Error::Regime(format!("normalizer {z} below 1/2")));
        }
        Ok(Instance2D {
            params,
            t_set,
            u_set,
            z,
            build_seed,
        })
    }

    pub fn in_removed(&self, x: f64, y: f64) -> bool {
        self.t_set.contains(x) && self.u_set.contains(y)
    }

    pub fn rectangles(&self) -> RectangleSet {
        let mut rects = Vec::with_capacity(self.t_set.len() * self.u_set.len());
        for tx in self.t_set.intervals() {
            for uy in self.u_set.intervals() {
                rects.push(Rectangle { x: *tx, y: *uy });
            }
        }
        RectangleSet { rects }
    }

    /// A(x,y).
    pub fn density(&self, x: f64, y: f64) -> f64 {
        if self.in_removed(x, y) {
            0.0
        } else {
            std_normal_pdf(x - self.params.epsilon) * std_normal_pdf(y) / self.z
        }
    }

    /// E_A[x^t y^s] for t,s ≤ tmax: row-major (tmax+1)², with
    /// Z·E_A[x^t y^s] = E_{N(ε,1)}[x^t]·E[y^s] − ∫_T x^t φ(x−ε) · ∫_U y^s φ(y).
    pub fn joint_moments(&self, tmax: usize) -> Result<Vec<f64>> {
        let tm = self.t_set.moments(tmax, self.params.epsilon)?;
        let um = self.u_set.moments(tmax, 0.0)?;
        let w = tmax + 1;
        let mut out = vec![0.0; w * w];
        for t in 0..w {
            for s in 0..w {
                out[t * w + s] = (shifted_gaussian_moment(t, self.params.epsilon)
                    * gaussian_moment(s)
                    - tm[t] * um[s])
                    / self.z;
            }
        }
        Ok(out)
    }

    /// (1/Z)∫ x^t φ(x−ε)(1 − δ1_T(x)) dx, with δ the measured mass of U.
    pub fn marginal_x(&self, t: usize) -> Result<f64> {
        let tm = self.t_set.moments(t, self.params.epsilon)?;
        let delta = self.u_set.mass(0.0);
        Ok((shifted_gaussian_moment(t, self.params.epsilon) - delta * tm[t]) / self.z)
    }

    /// E_A[He_a(x) He_b(y)] for a, b ≤ n: row-major (n+1)².
    ///
    /// E_{N(ε,1)}[He_a] = ε^a and E_{N(0,1)}[He_b] = [b = 0], so only the
    /// removed rectangles need integrating.
    pub fn hermite_moments(&self, n: usize) -> Result<Vec<f64>> {
        let tm = self.t_set.moments(n, self.params.epsilon)?;
        let um = self.u_set.moments(n, 0.0)?;
        let proj = |m: &[f64], a: usize| -> f64 {
            hermite_coeffs(a).iter().zip(m).map(|(c, v)| c * v).sum()
        };
        let w = n + 1;
        let mut out = vec![0.0; w * w];
        for a in 0..w {
            let ht = proj(&tm, a);
            for b in 0..w {
                let full = if b == 0 {
                    self.params.epsilon.powi(a as i32)
                } else {
                    0.0
                };
                out[a * w + b] = (full - ht * proj(&um, b)) / self.z;
            }
        }
        Ok(out)
    }
}

pub fn joint_moment(inst: &Instance2D, t: usize, s: usize) -> Result<f64> {
    let max = 2 * inst.params.k + 2;
    if t + s > max {
        return Err(Error::DegreeOutOfRange { degree: t + s, max });
    }
    let w = t.max(s) + 1;
    Ok(inst.joint_moments(w - 1)?[t * w + s])
}

/// χ²(A, N(0,I₂)) = e^{ε²}(1 − δ·Pr_{N(2ε,1)}[T]) / Z² − 1, using
/// φ(x−ε)²/φ(x) = e^{ε²} φ(x−2ε).
pub fn chi_square(inst: &Instance2D) -> f64 {
    let e = inst.params.epsilon;
    let removed = inst.t_set.mass(2.0 * e) * inst.u_set.mass(0.0);
    (e * e).exp() * (1.0 - removed) / (inst.z * inst.z) - 1.0
}

/// Comparator e^{ε²}/Z² − 1 with the normalization kept.
pub fn chi_square_bound(inst: &Instance2D) -> f64 {
    let e = inst.params.epsilon;
    (e * e).exp() / (inst.z * inst.z) - 1.0
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub n: usize,
}

const MC_CHUNK: usize = 1 << 16;

/// χ² + 1 = E_{N(0,I₂)}[(A/φ₂)²] with A/φ₂ = e^{εx−ε²/2}·1_S/Z.
pub fn chi_square_mc(inst: &Instance2D, n: usize, seed: u64) -> McEstimate {
    let e = inst.params.epsilon;
    let chunks = n.div_ceil(MC_CHUNK);
    let (sum, sum2) = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let m = MC_CHUNK.min(n - c * MC_CHUNK);
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..m {
                let x: f64 = StandardNormal.sample(&mut rng);
                let y: f64 = StandardNormal.sample(&mut rng);
                if !inst.in_removed(x, y) {
                    let r = (e * x - 0.5 * e * e).exp() / inst.z;
                    let v = r * r;
                    s1 += v;
                    s2 += v * v;
                }
            }
            (s1, s2)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sum2 / nf - mean * mean).max(0.0);
    McEstimate {
        estimate: mean - 1.0,
        standard_error: (var / nf).sqrt(),
        n,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rectangle {
    pub x: Interval,
    pub y: Interval,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RectangleSet {
    pub rects: Vec<Rectangle>,
}

fn overlap(a: Interval, b: Interval) -> (f64, f64) {
    (a.lo.max(b.lo), a.hi.min(b.hi))
}

impl RectangleSet {
    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.rects
            .iter()
            .any(|r| r.x.contains(x) && r.y.contains(y))
    }
}

/// Gaussian surface area of a union of axis-aligned rectangles under
/// N(center, I₂): the boundary integral of the density.
///
/// A vertical edge at x = c spanning [y₁, y₂] contributes
/// φ(c − c_x)(Φ(y₂ − c_y) − Φ(y₁ − c_y)), and likewise for horizontal
/// edges. Stretches shared by two touching rectangles are interior to the
/// union and are removed.
pub fn gaussian_surface_area(rects: &RectangleSet, center: (f64, f64)) -> Result<f64> {
    let (cx, cy) = center;
    let r = &rects.rects;
    for i in 0..r.len() {
        for j in i + 1..r.len() {
            let (xa, xb) = overlap(r[i].x, r[j].x);
            let (ya, yb) = overlap(r[i].y, r[j].y);
            if xb > xa && yb > ya {
                return Err(Error::Overlap(i, j));
            }
        }
    }
    let seg = |c: f64, lo: f64, hi: f64, along: f64| -> f64 {
        if !c.is_finite() || hi <= lo {
            return 0.0;
        }
        std_normal_pdf(c) * (std_normal_cdf(hi - along) - std_normal_cdf(lo - along))
    };
    let mut gamma = 0.0;
    for q in r {
        gamma += seg(q.x.lo - cx, q.y.lo, q.y.hi, cy) + seg(q.x.hi - cx, q.y.lo, q.y.hi, cy);
        gamma += seg(q.y.lo - cy, q.x.lo, q.x.hi, cx) + seg(q.y.hi - cy, q.x.lo, q.x.hi, cx);
    }
    for i in 0..r.len() {
        for j in 0..r.len() {
            if i == j {
                continue;
            }
            if r[i].x.hi == r[j].x.lo {
                let (a, b) = overlap(r[i].y, r[j].y);
                gamma -= 2.0 * seg(r[i].x.hi - cx, a, b, cy);
            }
            if r[i].y.hi == r[j].y.lo {
                let (a, b) = overlap(r[i].x, r[j].x);
                gamma -= 2.0 * seg(r[i].y.hi - cy, a, b, cx);
            }
        }
    }
    Ok(gamma)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentResidual {
    pub t: usize,
    pub s: usize,
    pub value: f64,
    pub gaussian: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificatePasses {
    pub moments: bool,
    pub mass: bool,
    pub gsa: bool,
    pub chi_square: bool,
    pub u_mass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub schema_version: u32,
    pub epsilon: f64,
    pub k: usize,
    pub moment_residuals: Vec<MomentResidual>,
    pub max_moment_residual: f64,
    pub moment_tolerance: f64,
    /// E_A[x^{k+1}] − E[x^{k+1}] under N(0,1).
    pub gap_star: f64,
    pub chi_square: f64,
    pub chi_square_bound: f64,
    /// e^{ε²} − 1, the comparator without the 1/Z² factor.
    pub chi_square_unnormalized: f64,
    /// Γ(T×U) under the standard Gaussian.
    pub gsa: f64,
    /// Γ(T×U) under N((ε,0), I₂).
    pub gsa_shifted: f64,
    pub mass_s: f64,
    pub u_mass_error: f64,
    pub interval_counts: (usize, usize),
    pub rectangle_count: usize,
    pub passes: CertificatePasses,
    pub pass: bool,
}

pub fn verify_instance(inst: &Instance2D) -> Result<VerificationReport> {
    let k = inst.params.k;
    let w = k + 2;
    let jm = inst.joint_moments(w - 1)?;
    let pairs: Vec<(usize, usize)> = (0..=k)
        .flat_map(|t| (0..=k - t).map(move |s| (t, s)))
        .collect();
    let moment_residuals: Vec<MomentResidual> = pairs
        .par_iter()
        .map(|&(t, s)| {
            let value = jm[t * w + s];
            let gaussian = gaussian_moment(t) * gaussian_moment(s);
            MomentResidual {
                t,
                s,
                value,
                gaussian,
                residual: (value - gaussian).abs(),
            }
        })
        .collect();
    let max_moment_residual = moment_residuals
        .iter()
        .fold(0.0f64, |m, r| m.max(r.residual));
    let gap_star = jm[(k + 1) * w] - gaussian_moment(k + 1);
    let chi = chi_square(inst);
    let bound = chi_square_bound(inst);
    let rects = inst.rectangles();
    let gsa = gaussian_surface_area(&rects, (0.0, 0.0))?;
    let gsa_shifted = gaussian_surface_area(&rects, (inst.params.epsilon, 0.0))?;
    let u_mass_error = (inst.u_set.mass(0.0) - inst.params.delta).abs();
    let passes = CertificatePasses {
        moments: max_moment_residual <= MOMENT_TOL,
        mass: inst.z >= 0.5,
        gsa: gsa <= 1.0,
        chi_square: chi.is_finite() && chi <= bound,
        u_mass: u_mass_error <= 1e-8,
    };
    let pass = passes.moments && passes.mass && passes.gsa && passes.chi_square && passes.u_mass;
    let e = inst.params.epsilon;
    Ok(VerificationReport {
        schema_version: SCHEMA_VERSION,
        epsilon: e,
        k,
        moment_residuals,
        max_moment_residual,
        moment_tolerance: MOMENT_TOL,
        gap_star,
        chi_square: chi,
        chi_square_bound: bound,
        chi_square_unnormalized: (e * e).exp() - 1.0,
        gsa,
        gsa_shifted,
        mass_s: inst.z,
        u_mass_error,
        interval_counts: (inst.t_set.len(), inst.u_set.len()),
        rectangle_count: rects.len(),
        passes,
        pass,
    })
}

/// Moment residual table as CSV.
pub fn residuals_csv(report: &VerificationReport) -> String {
    let mut out = String::from("t,s,value,gaussian,residual\n");
    for r in &report.moment_residuals {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.t, r.s, r.value, r.gaussian, r.residual
        ));
    }
    out
}

/// On-disk instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceFile {
    pub schema_version: u32,
    pub epsilon: f64,
    pub k: usize,
    pub seed: u64,
    #[serde(rename = "T")]
    pub t_set: IntervalUnion,
    #[serde(rename = "U")]
    pub u_set: IntervalUnion,
    #[serde(rename = "Z")]
    pub z: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificates: Option<VerificationReport>,
}

impl InstanceFile {
    pub fn new(inst: &Instance2D, certificates: Option<VerificationReport>) -> Self {
        InstanceFile {
            schema_version: SCHEMA_VERSION,
            epsilon: inst.params.epsilon,
            k: inst.params.k,
            seed: inst.build_seed,
            t_set: inst.t_set.clone(),
            u_set: inst.u_set.clone(),
            z: inst.z,
            certificates,
        }
    }

    /// Rebuilds the instance. Z is recomputed from the sets; certificates
    /// are not trusted.
    pub fn instance(&self) -> Result<Instance2D> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        let params = SoftParams::new(self.epsilon, self.k)?;
        Instance2D::from_sets(params, self.t_set.clone(), self.u_set.clone(), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn inst() -> &'static Instance2D {
        static I: OnceLock<Instance2D> = OnceLock::new();
        I.get_or_init(|| assemble_instance(0.05, 3, 1).unwrap())
    }

    fn bare(eps: f64) -> Instance2D {
        let p = SoftParams::new(eps, 3).unwrap();
        Instance2D::from_sets(p, IntervalUnion::empty(), IntervalUnion::empty(), 0).unwrap()
    }

    #[test]
    fn normalizer_matches_xi() {
        let i = inst();
        assert!((i.z - (1.0 - 0.05f64.powf(0.8))).abs() < 1e-6);
        // 1 − 0.05^0.8 = 0.908972...
        assert!((i.z - 0.908972).abs() < 1e-5);
        assert!(i.rectangles().len() <= 4 * 3);
    }

    #[test]
    fn low_joint_moments_are_gaussian() {
        let i = inst();
        assert!((joint_moment(i, 0, 0).unwrap() - 1.0).abs() < 1e-12);
        for t in 0..=3 {
            for s in 0..=3 - t {
                let g = gaussian_moment(t) * gaussian_moment(s);
                assert!(
                    (joint_moment(i, t, s).unwrap() - g).abs() <= 1e-6,
                    "({t},{s})"
                );
            }
        }
        assert!((joint_moment(i, 4, 0).unwrap() - 3.0).abs() > 1e-6);
        assert!(joint_moment(i, 5, 4).is_err());
    }

    // The x and y integrals separate once the U moments are matched.
    #[test]
    fn factorization_identity() {
        let i = inst();
        for t in 0..=5 {
            for s in 0..=3 {
                let lhs = joint_moment(i, t, s).unwrap();
                let rhs = i.marginal_x(t).unwrap() * gaussian_moment(s);
                assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()), "({t},{s})");
            }
        }
    }

    #[test]
    fn chi_square_closed_forms() {
        let p0 = Instance2D {
            params: SoftParams::new(0.05, 3).unwrap(),
            t_set: IntervalUnion::empty(),
            u_set: IntervalUnion::empty(),
            z: 1.0,
            build_seed: 0,
        };
        assert!((chi_square(&p0) - ((0.05f64 * 0.05).exp() - 1.0)).abs() < 1e-15);
        let b = bare(0.02);
        assert!((chi_square(&b) - ((0.02f64 * 0.02).exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn chi_square_against_monte_carlo() {
        let i = inst();
        let exact = chi_square(i);
        let mc = chi_square_mc(i, 2_000_000, 5);
        assert!(
            (mc.estimate - exact).abs() <= 4.0 * mc.standard_error,
            "{exact} vs {mc:?}"
        );
        assert!(exact <= chi_square_bound(i));
    }

    #[test]
    fn gsa_examples() {
        assert_eq!(
            gaussian_surface_area(&RectangleSet::default(), (0.0, 0.0)).unwrap(),
            0.0
        );
        let a = 0.8;
        let strip = RectangleSet {
            rects: vec![Rectangle {
                x: Interval { lo: -a, hi: a },
                y: Interval::real_line(),
            }],
        };
        let g = gaussian_surface_area(&strip, (0.0, 0.0)).unwrap();
        assert!((g - 2.0 * std_normal_pdf(a)).abs() < 1e-15);
    }

    // Two halves of a square sharing an edge have the square's boundary.
    #[test]
    fn gsa_touching_and_additive() {
        let sq = |x0: f64, x1: f64, y0: f64, y1: f64| Rectangle {
            x: Interval { lo: x0, hi: x1 },
            y: Interval { lo: y0, hi: y1 },
        };
        let whole = RectangleSet {
            rects: vec![sq(0.0, 1.0, 0.0, 1.0)],
        };
        let halves = RectangleSet {
            rects: vec![sq(0.0, 0.5, 0.0, 1.0), sq(0.5, 1.0, 0.0, 1.0)],
        };
        let c = (0.1, -0.2);
        let gw = gaussian_surface_area(&whole, c).unwrap();
        let gh = gaussian_surface_area(&halves, c).unwrap();
        assert!((gw - gh).abs() < 1e-14);
        let apart = RectangleSet {
            rects: vec![sq(-2.0, -1.0, 0.0, 1.0), sq(0.5, 1.0, -1.0, 2.0)],
        };
        let sum: f64 = apart
            .rects
            .iter()
            .map(|r| gaussian_surface_area(&RectangleSet { rects: vec![*r] }, c).unwrap())
            .sum();
        assert!((gaussian_surface_area(&apart, c).unwrap() - sum).abs() <= 1e-12);
        let clash = RectangleSet {
            rects: vec![sq(0.0, 1.0, 0.0, 1.0), sq(0.5, 1.5, 0.5, 1.5)],
        };
        assert!(matches!(
            gaussian_surface_area(&clash, c),
            Err(Error::Overlap(0, 1))
        ));
    }

    // Finite-δ Monte Carlo of N(A_δ \ A)/δ for the unit square.
    #[test]
    fn gsa_unit_square_monte_carlo() {
        let sq = RectangleSet {
            rects: vec![Rectangle {
                x: Interval { lo: 0.0, hi: 1.0 },
                y: Interval { lo: 0.0, hi: 1.0 },
            }],
        };
        let exact = gaussian_surface_area(&sq, (0.0, 0.0)).unwrap();
        let h = 1e-3;
        // Sample only the band [−h, 1+h]² and weight by its mass.
        let band = std_normal_cdf(1.0 + h) - std_normal_cdf(-h);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000_000;
        let mut hits = 0usize;
        for _ in 0..n {
            let mut draw = || loop {
                let z: f64 = StandardNormal.sample(&mut rng);
                if z >= -h && z <= 1.0 + h {
                    return z;
                }
            };
            let (x, y) = (draw(), draw());
            let inside = (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y);
            let dx = (-x).max(x - 1.0).max(0.0);
            let dy = (-y).max(y - 1.0).max(0.0);
            if !inside && (dx * dx + dy * dy).sqrt() <= h {
                hits += 1;
            }
        }
        let est = hits as f64 / n as f64 * band * band / h;
        assert!((est - exact).abs() <= 0.02 * exact, "{est} vs {exact}");
    }

    #[test]
    fn verify_passes_and_round_trips() {
        let i = inst();
        let r = verify_instance(i).unwrap();
        assert!(r.pass, "{r:?}");
        let m10 = r
            .moment_residuals
            .iter()
            .find(|m| m.t == 1 && m.s == 0)
            .unwrap();
        assert!(m10.value.abs() <= 1e-6);
        assert!(r.gap_star.abs() > 1e-6);
        let file = InstanceFile::new(i, Some(r.clone()));
        let json = serde_json::to_string(&file).unwrap();
        let back: InstanceFile = serde_json::from_str(&json).unwrap();
        let again = verify_instance(&back.instance().unwrap()).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn corrupted_interval_fails_moments() {
        let i = inst();
        let mut ivs = i.t_set.intervals().to_vec();
        ivs[0].hi += 0.05;
        let bad = Instance2D::from_sets(
            i.params,
            IntervalUnion::new(ivs).unwrap(),
            i.u_set.clone(),
            1,
        )
        .unwrap();
        assert!(!verify_instance(&bad).unwrap().passes.moments);
    }

    #[test]
    fn hermite_moments_match_monomials() {
        let i = inst();
        let n = 5;
        let hm = i.hermite_moments(n).unwrap();
        let jm = i.joint_moments(n).unwrap();
        for a in 0..=n {
            for b in 0..=n {
                let (ca, cb) = (hermite_coeffs(a), hermite_coeffs(b));
                let mut v = 0.0;
                for (p, x) in ca.iter().enumerate() {
                    for (q, y) in cb.iter().enumerate() {
                        v += x * y * jm[p * (n + 1) + q];
                    }
                }
                assert!((v - hm[a * (n + 1) + b]).abs() < 1e-9, "({a},{b})");
            }
        }
    }

    #[test]
    fn rejects_out_of_regime() {
        assert!(matches!(
            assemble_instance(0.5, 3, 1),
            Err(Error::Regime(_))
        ));
        assert!(matches!(
            assemble_instance(0.05, 5, 1),
            Err(Error::Regime(_))
        ));
    }
}
