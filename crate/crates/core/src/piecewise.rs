//! Two-valued piecewise-constant functions and finite unions of intervals.

use crate::error::{Error, Result};
use crate::gauss::{
    gaussian_moment, shifted_gaussian_moment, shifted_incomplete_moments, Interval,
};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const MAX_WEIGHTED_DEGREE: usize = 32;

/// A function ℝ → {low, high} that alternates value at each breakpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoValuedPiecewise {
    breakpoints: Vec<f64>,
    low: f64,
    high: f64,
    leading_high: bool,
}

impl TwoValuedPiecewise {
    pub fn new(breakpoints: Vec<f64>, low: f64, high: f64, leading_high: bool) -> Result<Self> {
        if !(low < high) || !low.is_finite() || !high.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "need finite low < high, got {low}, {high}"
            )));
        }
        if breakpoints.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidArgument("breakpoints must be finite".into()));
        }
        if let Some(w) = breakpoints.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(format!(
                "breakpoints must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(TwoValuedPiecewise {
            breakpoints,
            low,
            high,
            leading_high,
        })
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn low(&self) -> f64 {
        self.low
    }

    pub fn high(&self) -> f64 {
        self.high
    }

    pub fn leading_high(&self) -> bool {
        self.leading_high
    }

    pub fn num_pieces(&self) -> usize {
        self.breakpoints.len() + 1
    }

    pub fn piece_is_high(&self, j: usize) -> bool {
        self.leading_high ^ (j % 2 == 1)
    }

    pub fn piece_value(&self, j: usize) -> f64 {
        if self.piece_is_high(j) {
            self.high
        } else {
            self.low
        }
    }

    pub fn piece(&self, j: usize) -> Interval {
        let lo = if j == 0 {
            f64::NEG_INFINITY
        } else {
            self.breakpoints[j - 1]
        };
        let hi = self.breakpoints.get(j).copied().unwrap_or(f64::INFINITY);
        Interval { lo, hi }
    }

    pub fn value_at(&self, x: f64) -> f64 {
        let j = self.breakpoints.partition_point(|z| *z <= x);
        self.piece_value(j)
    }

    /// Same breakpoints with the two values replaced.
    pub fn with_values(&self, low: f64, high: f64) -> Result<Self> {
        TwoValuedPiecewise::new(self.breakpoints.clone(), low, high, self.leading_high)
    }

    /// E_{z∼N(shift,1)}[f(z) z^t] for t = 0..=tmax.
    pub fn weighted_moments(&self, tmax: usize, shift: f64) -> Result<Vec<f64>> {
        if tmax > MAX_WEIGHTED_DEGREE {
            return Err(Error::DegreeOutOfRange {
                degree: tmax,
                max: MAX_WEIGHTED_DEGREE,
            });
        }
        // Sum the low value over the whole line, then add the excess on high pieces.
        let mut out: Vec<f64> = (0..=tmax)
            .map(|t| self.low * shifted_gaussian_moment(t, shift))
            .collect();
        let diff = self.high - self.low;
        for j in 0..self.num_pieces() {
            if self.piece_is_high(j) {
                let m = shifted_incomplete_moments(tmax, shift, self.piece(j))?;
                for t in 0..=tmax {
                    out[t] += diff * m[t];
                }
            }
        }
        Ok(out)
    }

    /// Set where the function takes its high value.
    pub fn high_set(&self) -> Result<IntervalUnion> {
        self.level_set(true)
    }

    /// Set where the function takes its low value.
    pub fn low_set(&self) -> Result<IntervalUnion> {
        self.level_set(false)
    }

    fn level_set(&self, high: bool) -> Result<IntervalUnion> {
        let ivs = (0..self.num_pieces())
            .filter(|&j| self.piece_is_high(j) == high)
            .map(|j| self.piece(j))
            .collect();
        IntervalUnion::new(ivs)
    }
}

pub fn weighted_moment(f: &TwoValuedPiecewise, t: usize, shift: f64) -> Result<f64> {
    Ok(f.weighted_moments(t, shift)?[t])
}

/// Sorted, pairwise separated intervals.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct IntervalUnion {
    intervals: Vec<Interval>,
}

impl IntervalUnion {
    pub fn new(intervals: Vec<Interval>) -> Result<Self> {
        for iv in &intervals {
            Interval::new(iv.lo, iv.hi)?;
            if !(iv.hi > iv.lo) {
                return Err(Error::InvalidInterval {
                    lo: iv.lo,
                    hi: iv.hi,
                });
            }
        }
        for w in intervals.windows(2) {
            if !(w[1].lo > w[0].hi) {
                return Err(Error::InvalidArgument(format!(
                    "intervals must be sorted with positive gaps: [{}, {}] then [{}, {}]",
                    w[0].lo, w[0].hi, w[1].lo, w[1].hi
                )));
            }
        }
        if intervals.len() == 1
            && intervals[0].lo == f64::NEG_INFINITY
            && intervals[0].hi == f64::INFINITY
        {
            return Err(Error::InvalidArgument(
                "the whole line is not a proper subset".into(),
            ));
        }
        Ok(IntervalUnion { intervals })
    }

    pub fn empty() -> Self {
        IntervalUnion {
            intervals: Vec::new(),
        }
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn contains(&self, x: f64) -> bool {
        let j = self.intervals.partition_point(|iv| iv.hi < x);
        self.intervals.get(j).is_some_and(|iv| iv.lo <= x)
    }

    /// Mass under N(shift, 1).
    pub fn mass(&self, shift: f64) -> f64 {
        self.intervals
            .iter()
            .map(|iv| iv.gaussian_mass(shift))
            .sum()
    }

    /// ∫_U x^t φ(x − shift) dx for t = 0..=tmax.
    pub fn moments(&self, tmax: usize, shift: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; tmax + 1];
        for iv in &self.intervals {
            let m = shifted_incomplete_moments(tmax, shift, *iv)?;
            for t in 0..=tmax {
                out[t] += m[t];
            }
        }
        Ok(out)
    }
}

/// E[z^t | z ∈ U] (inside) or E[z^t | z ∉ U] for z ~ N(0,1).
pub fn conditional_moment(u: &IntervalUnion, t: usize, inside: bool) -> Result<f64> {
    let mass = u.mass(0.0);
    if !(mass > 0.0 && mass < 1.0) {
        return Err(Error::ZeroMass);
    }
    let m = u.moments(t, 0.0)?[t];
    Ok(if inside {
        m / mass
    } else {
        (gaussian_moment(t) - m) / (1.0 - mass)
    })
}

/// f = 1−δ on U and −δ off U. The declared δ must equal the mass of U.
pub fn indicator_to_twovalued(u: &IntervalUnion, delta: f64) -> Result<TwoValuedPiecewise> {
    let measured = u.mass(0.0);
    if !((measured - delta).abs() <= 1e-10) {
        return Err(Error::MassMismatch {
            declared: delta,
            measured,
        });
    }
    let leading_high = u
        .intervals
        .first()
        .is_some_and(|iv| iv.lo == f64::NEG_INFINITY);
    let breakpoints = u
        .intervals
        .iter()
        .flat_map(|iv| [iv.lo, iv.hi])
        .filter(|x| x.is_finite())
        .collect();
    TwoValuedPiecewise::new(breakpoints, -delta, 1.0 - delta, leading_high)
}

pub fn twovalued_to_indicator(f: &TwoValuedPiecewise) -> Result<IntervalUnion> {
    f.high_set()
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Endpoint {
    Num(f64),
    Sym(String),
}

impl Endpoint {
    fn from_f64(x: f64) -> Self {
        if x == f64::INFINITY {
            Endpoint::Sym("inf".into())
        } else if x == f64::NEG_INFINITY {
            Endpoint::Sym("-inf".into())
        } else {
            Endpoint::Num(x)
        }
    }

    fn to_f64(&self) -> std::result::Result<f64, String> {
        match self {
            Endpoint::Num(x) => Ok(*x),
            Endpoint::Sym(s) if s == "inf" => Ok(f64::INFINITY),
            Endpoint::Sym(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Endpoint::Sym(s) => Err(format!("unknown endpoint sentinel {s:?}")),
        }
    }
}

impl Serialize for IntervalUnion {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let pairs: Vec<[Endpoint; 2]> = self
            .intervals
            .iter()
            .map(|iv| [Endpoint::from_f64(iv.lo), Endpoint::from_f64(iv.hi)])
            .collect();
        pairs.serialize(s)
    }
}

impl<'de> Deserialize<'de> for IntervalUnion {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let pairs: Vec<[Endpoint; 2]> = Vec::deserialize(d)?;
        let mut ivs = Vec::with_capacity(pairs.len());
        for [lo, hi] in &pairs {
            let lo = lo.to_f64().map_err(D::Error::custom)?;
            let hi = hi.to_f64().map_err(D::Error::custom)?;
            ivs.push(Interval { lo, hi });
        }
        IntervalUnion::new(ivs).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::std_normal_pdf;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn iv(lo: f64, hi: f64) -> Interval {
        Interval::new(lo, hi).unwrap()
    }

    #[test]
    fn constant_function_moments() {
        let f = TwoValuedPiecewise::new(vec![], 0.0, 2.5, true).unwrap();
        for t in 0..6 {
            let m = weighted_moment(&f, t, 0.3).unwrap();
            assert!((m - 2.5 * shifted_gaussian_moment(t, 0.3)).abs() < 1e-13);
        }
    }

    #[test]
    fn symmetric_function_odd_moments_vanish() {
        let f = TwoValuedPiecewise::new(vec![-2.0, -0.5, 0.5, 2.0], -1.0, 1.0, false).unwrap();
        for t in [1, 3, 5] {
            assert!(weighted_moment(&f, t, 0.0).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_moment_vs_monte_carlo() {
        let f = TwoValuedPiecewise::new(vec![-1.1, 0.2, 0.9], -0.4, 1.3, true).unwrap();
        let shift = 0.25;
        let exact = weighted_moment(&f, 2, shift).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z: f64 = shift + rng.sample::<f64, _>(StandardNormal);
            let v = f.value_at(z) * z * z;
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - exact).abs() < 4.0 * se,
            "{mean} vs {exact} (se {se})"
        );
    }

    #[test]
    fn degree_limit() {
        let f = TwoValuedPiecewise::new(vec![0.0], 0.0, 1.0, false).unwrap();
        assert!(matches!(
            weighted_moment(&f, 33, 0.0),
            Err(Error::DegreeOutOfRange { .. })
        ));
    }

    #[test]
    fn conditional_moment_examples() {
        let a = 0.674_489_750_196_081_7;
        let u = IntervalUnion::new(vec![iv(-a, a)]).unwrap();
        assert!((u.mass(0.0) - 0.5).abs() < 1e-12);
        assert!(conditional_moment(&u, 1, true).unwrap().abs() < 1e-15);
        assert!((conditional_moment(&u, 0, false).unwrap() - 1.0).abs() < 1e-15);
        let half = IntervalUnion::new(vec![iv(0.0, f64::INFINITY)]).unwrap();
        let m = conditional_moment(&half, 1, true).unwrap();
        assert!((m - 2.0 * std_normal_pdf(0.0)).abs() < 1e-15);
        assert!(matches!(
            conditional_moment(&IntervalUnion::empty(), 1, true),
            Err(Error::ZeroMass)
        ));
    }

    #[test]
    fn indicator_round_trip() {
        let u = IntervalUnion::new(vec![iv(f64::NEG_INFINITY, -1.2), iv(0.1, 0.7)]).unwrap();
        let delta = u.mass(0.0);
        let f = indicator_to_twovalued(&u, delta).unwrap();
        assert_eq!(f.low(), -delta);
        assert_eq!(f.high(), 1.0 - delta);
        assert!(weighted_moment(&f, 0, 0.0).unwrap().abs() < 1e-15);
        assert_eq!(twovalued_to_indicator(&f).unwrap(), u);
        assert!(matches!(
            indicator_to_twovalued(&u, delta + 1e-6),
            Err(Error::MassMismatch { .. })
        ));
    }

    #[test]
    fn mass_point_three_maps_to_expected_values() {
        // Interval [0, b] with Φ(b) − 1/2 = 0.3.
        let (mut lo, mut hi) = (0.0, 3.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if crate::gauss::gaussian_mass(0.0, mid) < 0.3 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let u = IntervalUnion::new(vec![iv(0.0, lo)]).unwrap();
        let f = indicator_to_twovalued(&u, 0.3).unwrap();
        assert!((f.low() + 0.3).abs() < 1e-15 && (f.high() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn json_sentinels() {
        let u =
            IntervalUnion::new(vec![iv(f64::NEG_INFINITY, -1.0), iv(0.5, f64::INFINITY)]).unwrap();
        let s = serde_json::to_string(&u).unwrap();
        assert_eq!(s, r#"[["-inf",-1.0],[0.5,"inf"]]"#);
        let back: IntervalUnion = serde_json::from_str(&s).unwrap();
        assert_eq!(back, u);
        assert!(serde_json::from_str::<IntervalUnion>(r#"[[1.0,0.0]]"#).is_err());
        assert!(serde_json::from_str::<IntervalUnion>(r#"[[0.0,1.0],[0.5,2.0]]"#).is_err());
    }

    #[test]
    fn membership_binary_search() {
        let u =
            IntervalUnion::new(vec![iv(-3.0, -2.0), iv(0.0, 1.0), iv(4.0, f64::INFINITY)]).unwrap();
        for (x, want) in [
            (-2.5, true),
            (-1.0, false),
            (0.0, true),
            (1.0, true),
            (2.0, false),
            (1e9, true),
            (-9.0, false),
        ] {
            assert_eq!(u.contains(x), want, "x={x}");
        }
    }

    fn random_union(raw: &[(f64, f64)]) -> Option<IntervalUnion> {
        let mut x = -3.0;
        let mut ivs = Vec::new();
        for &(gap, width) in raw {
            let lo = x + gap;
            let hi = lo + width;
            ivs.push(Interval { lo, hi });
            x = hi;
        }
        let u = IntervalUnion::new(ivs).ok()?;
        let m = u.mass(0.0);
        (m > 0.02 && m < 0.98).then_some(u)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        // |E[z^t f]| ≤ τ implies the conditional moments differ by at most τ/(δ(1−δ)).
        #[test]
        fn equivalence_chain(raw in proptest::collection::vec((0.05f64..1.0, 0.05f64..1.0), 1..5), t in 1usize..6) {
            let Some(u) = random_union(&raw) else { return Ok(()); };
            let delta = u.mass(0.0);
            let f = indicator_to_twovalued(&u, delta).unwrap();
            let lhs = weighted_moment(&f, t, 0.0).unwrap().abs();
            let gap = (conditional_moment(&u, t, true).unwrap() - conditional_moment(&u, t, false).unwrap()).abs();
            // f = 1_U − δ gives E[z^t f] = δ(1−δ)(E[z^t|U] − E[z^t|U^c]) exactly.
            prop_assert!((lhs - delta * (1.0 - delta) * gap).abs() < 1e-10);
            let tau = 1e-8;
            if lhs <= tau {
                prop_assert!(gap <= tau / (delta * (1.0 - delta)) + 1e-12);
            }
            // E[z^t f] = 0 iff E[z^t | z ∉ U] = E[z^t]; the two differ by the factor 1−δ.
            let out = conditional_moment(&u, t, false).unwrap() - gaussian_moment(t);
            prop_assert!((lhs - (1.0 - delta) * out.abs()).abs() < 1e-10);
        }

        #[test]
        fn weighted_moments_linear_in_values(raw in proptest::collection::vec((0.05f64..1.0, 0.05f64..1.0), 1..5), shift in -0.5f64..0.5) {
            let Some(u) = random_union(&raw) else { return Ok(()); };
            let f = indicator_to_twovalued(&u, u.mass(0.0)).unwrap();
            let g = f.with_values(0.0, 1.0).unwrap();
            let m = g.weighted_moments(4, shift).unwrap();
            let direct = u.moments(4, shift).unwrap();
            for t in 0..=4 {
                prop_assert!((m[t] - direct[t]).abs() < 1e-12);
            }
        }
    }
}
