//! The set U: a union of intervals of Gaussian mass δ whose complement has
//! the same first k conditional moments as N(0,1).
//!
//! Built in two stages. A fine grid splits every cell of width s into a
//! fraction δ valued 1−δ and a fraction 1−δ valued −δ, which nearly zeroes
//! E[g(z) z^t]; the breakpoint flow then collapses it to a handful of pieces
//! while driving those moments to zero exactly.

use crate::error::{Error, Result};
use crate::gauss::{gaussian_moment, incomplete_moment, Interval, MomentVector};
use crate::piecewise::{
    conditional_moment, twovalued_to_indicator, IntervalUnion, TwoValuedPiecewise,
};
use crate::reduce::{reduce_breakpoints_traced, ReductionConfig, ReductionTrace};

const INITIAL_STEP: f64 = 0.05;
const MIN_STEP: f64 = 1e-7;
const MAX_BREAKPOINTS: usize = 5_000_000;

/// Residual level of the grid function handed to the reduction; the flow's
/// Newton projection removes what is left.
pub const U_ENTRY_ETA: f64 = 1e-3;

/// Grid extent: beyond ±L both tails carry value 1−δ, so L is chosen to make
/// their joint contribution to every moment at most η/4.
fn grid_extent(k: usize, eta: f64) -> Result<f64> {
    let mut l: f64 = 3.0;
    loop {
        let tail = Interval {
            lo: l,
            hi: f64::INFINITY,
        };
        let worst = (0..=k)
            .map(|t| incomplete_moment(t, tail).map(|m| 2.0 * m.abs()))
            .try_fold(0.0f64, |m, v| v.map(|v| m.max(v)))?;
        if worst <= eta / 4.0 || l >= 11.0 {
            return Ok(l);
        }
        l += 0.25;
    }
}

/// Breakpoints of the grid with step s and extent i_max·s: high on
/// [is, (i+δ)s] and its mirror image, and on both tails beyond ±i_max·s.
pub fn grid_function(delta: f64, s: f64, i_max: usize) -> Result<TwoValuedPiecewise> {
    let mut pos = Vec::with_capacity(2 * i_max);
    for i in 0..i_max {
        pos.push((i as f64 + delta) * s);
        pos.push((i + 1) as f64 * s);
    }
    let mut bps: Vec<f64> = pos.iter().rev().map(|x| -x).collect();
    bps.extend(pos);
    TwoValuedPiecewise::new(bps, -delta, 1.0 - delta, true)
}

#[derive(Clone, Debug)]
pub struct ExplicitGrid {
    pub function: TwoValuedPiecewise,
    pub step: f64,
    pub i_max: usize,
    pub residual: f64,
}

pub fn explicit_construction(delta: f64, k: usize, eta: f64) -> Result<TwoValuedPiecewise> {
    explicit_construction_grid(delta, k, eta).map(|g| g.function)
}

pub fn explicit_construction_grid(delta: f64, k: usize, eta: f64) -> Result<ExplicitGrid> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in (0,1), got {delta}"
        )));
    }
    if k > 8 {
        return Err(Error::DegreeOutOfRange { degree: k, max: 8 });
    }
    if !(eta >= 1e-8) {
        return Err(Error::InvalidArgument(format!(
            "eta must be at least 1e-8, got {eta}"
        )));
    }
    let extent = grid_extent(k, eta)?;
    let mut s = INITIAL_STEP;
    let mut residual = f64::INFINITY;
    loop {
        let i_max = (extent / s).ceil() as usize;
        if 4 * i_max > MAX_BREAKPOINTS || s < MIN_STEP {
            return Err(Error::BudgetExceeded {
                step: s,
                pieces: 4 * i_max + 1,
                residual,
            });
        }
        let g = grid_function(delta, s, i_max)?;
        residual = g
            .weighted_moments(k, 0.0)?
            .iter()
            .fold(0.0, |m, v| m.max(v.abs()));
        if residual <= eta {
            return Ok(ExplicitGrid {
                function: g,
                step: s,
                i_max,
                residual,
            });
        }
        s *= 0.5;
    }
}

#[derive(Clone, Debug)]
pub struct UBuild {
    pub set: IntervalUnion,
    pub grid_step: f64,
    pub grid_breakpoints: usize,
    pub reduction: ReductionTrace,
    pub mass_error: f64,
    pub moment_residuals: Vec<f64>,
}

pub fn build_set_u(delta: f64, k: usize) -> Result<IntervalUnion> {
    build_set_u_traced(delta, k).map(|b| b.set)
}

pub fn build_set_u_traced(delta: f64, k: usize) -> Result<UBuild> {
    if !(delta > 0.01 && delta < 0.9) {
        return Err(Error::Regime(format!(
            "delta must lie in (0.01, 0.9), got {delta}"
        )));
    }
    if !(1..=6).contains(&k) {
        return Err(Error::Regime(format!("k must lie in 1..=6, got {k}")));
    }
    let grid = explicit_construction_grid(delta, k, U_ENTRY_ETA)
        .map_err(|e| e.in_stage("explicit construction"))?;
    let mut cfg = ReductionConfig::new(MomentVector::zeros(k));
    // Low tails keep U a union of bounded intervals.
    cfg.tail_value = Some(false);
    let (g, reduction) = reduce_breakpoints_traced(&grid.function, &cfg, 0.0)
        .map_err(|e| e.in_stage("breakpoint reduction"))?;
    let set = twovalued_to_indicator(&g)?;
    let mass_error = (set.mass(0.0) - delta).abs();
    let moment_residuals = (1..=k)
        .map(|t| conditional_moment(&set, t, false).map(|m| (m - gaussian_moment(t)).abs()))
        .collect::<Result<Vec<_>>>()?;
    if mass_error > 1e-8 {
        return Err(Error::Certificate(format!(
            "mass of U off by {mass_error:e}"
        )));
    }
    if let Some(r) = moment_residuals.iter().find(|r| **r > 1e-6) {
        return Err(Error::Certificate(format!(
            "conditional moment residual {r:e}"
        )));
    }
    Ok(UBuild {
        set,
        grid_step: grid.step,
        grid_breakpoints: grid.function.breakpoints().len(),
        reduction,
        mass_error,
        moment_residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{shifted_incomplete_moments, std_normal_cdf};

    #[test]
    fn explicit_examples() {
        let g = explicit_construction(0.5, 1, 1e-4).unwrap();
        assert!(g.weighted_moments(1, 0.0).unwrap()[1].abs() <= 1e-4);
        let g = explicit_construction(0.3, 0, 1e-3).unwrap();
        let hi = g.high_set().unwrap().mass(0.0);
        assert!((hi - 0.3).abs() <= 1e-3);
        let g = explicit_construction(0.3, 3, 1e-5).unwrap();
        for m in g.weighted_moments(3, 0.0).unwrap() {
            assert!(m.abs() <= 1e-5);
        }
    }

    #[test]
    fn explicit_rejects_bad_input() {
        assert!(explicit_construction(1.2, 2, 1e-3).is_err());
        assert!(explicit_construction(0.3, 9, 1e-3).is_err());
        assert!(explicit_construction(0.3, 2, 1e-9).is_err());
    }

    // Each cell's high part against its low part: the split ratio is within
    // δ/(1−δ)·exp(±(i+1/2)s²), the density ratio across one cell.
    #[test]
    fn grid_ratio() {
        let (delta, k) = (0.3, 3);
        let grid = explicit_construction_grid(delta, k, 1e-3).unwrap();
        let s = grid.step;
        let base = delta / (1.0 - delta);
        let mut i = 0usize;
        while (i as f64) * s <= 3.0 {
            let plus = Interval {
                lo: i as f64 * s,
                hi: (i as f64 + delta) * s,
            };
            let minus = Interval {
                lo: plus.hi,
                hi: (i + 1) as f64 * s,
            };
            let mp = shifted_incomplete_moments(k, 0.0, plus).unwrap();
            let mm = shifted_incomplete_moments(k, 0.0, minus).unwrap();
            let factor = ((i as f64 + 0.5) * s * s).exp();
            for t in 0..=k {
                if i == 0 && t > 0 {
                    continue;
                }
                let ratio = mp[t] / mm[t];
                assert!(ratio <= base * factor * (1.0 + 1e-12), "i={i} t={t}");
                if t == 0 {
                    assert!(ratio >= base / factor * (1.0 - 1e-12), "i={i}");
                }
            }
            i += 1;
        }
    }

    #[test]
    fn u_half_is_central_interval() {
        let u = build_set_u(0.5, 1).unwrap();
        let a = 0.674_489_750_196_081_7;
        assert_eq!(u.len(), 1, "{:?}", u.intervals());
        let iv = u.intervals()[0];
        assert!(
            (iv.lo + a).abs() < 1e-4 && (iv.hi - a).abs() < 1e-4,
            "{iv:?}"
        );
        assert!((std_normal_cdf(iv.hi) - std_normal_cdf(iv.lo) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn u_second_moment_matched() {
        let b = build_set_u_traced(0.3, 2).unwrap();
        assert!((conditional_moment(&b.set, 2, false).unwrap() - 1.0).abs() <= 1e-6);
        assert!((conditional_moment(&b.set, 0, false).unwrap() - 1.0).abs() < 1e-15);
        assert!(b.set.len() <= 2);
        assert!(b.reduction.max_flow_residual <= 1e-6);
    }

    #[test]
    fn u_rejects_regime() {
        assert!(matches!(build_set_u(0.95, 2), Err(Error::Regime(_))));
        assert!(matches!(build_set_u(0.3, 7), Err(Error::Regime(_))));
    }
}
