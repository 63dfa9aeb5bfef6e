//! The planar instance hidden in d dimensions: a 2×d orthonormal frame V,
//! the law of w whose projection Vw follows A and whose orthogonal
//! complement is standard Gaussian, and Monte Carlo checks on it.
//!
//! All randomness comes from ChaCha8 streams keyed by (seed, index), so any
//! output is reproducible under any parallel schedule.

use crate::error::{Error, Result};
use crate::instance::{chi_square, Instance2D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Rows of V: two orthonormal vectors in ℝ^d.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbeddingFrame {
    pub rows: [Vec<f64>; 2],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl EmbeddingFrame {
    pub fn new(r1: Vec<f64>, r2: Vec<f64>) -> Result<Self> {
        if r1.len() != r2.len() || r1.len() < 3 {
            return Err(Error::InvalidArgument(
                "frame rows must share a length of at least 3".into(),
            ));
        }
        let f = EmbeddingFrame { rows: [r1, r2] };
        if f.orthonormality_error() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "frame rows are not orthonormal (error {:e})",
                f.orthonormality_error()
            )));
        }
        Ok(f)
    }

    pub fn d(&self) -> usize {
        self.rows[0].len()
    }

    /// max |V Vᵀ − I₂|.
    pub fn orthonormality_error(&self) -> f64 {
        let [a, b] = &self.rows;
        (dot(a, a) - 1.0)
            .abs()
            .max((dot(b, b) - 1.0).abs())
            .max(dot(a, b).abs())
    }

    pub fn project(&self, w: &[f64]) -> (f64, f64) {
        (dot(&self.rows[0], w), dot(&self.rows[1], w))
    }

    /// U Vᵀ as [[a, b], [c, d]].
    pub fn cross(&self, other: &EmbeddingFrame) -> [[f64; 2]; 2] {
        let mut m = [[0.0; 2]; 2];
        for (i, r) in self.rows.iter().enumerate() {
            for (j, s) in other.rows.iter().enumerate() {
                m[i][j] = dot(r, s);
            }
        }
        m
    }
}

pub fn frobenius_norm(m: &[[f64; 2]; 2]) -> f64 {
    m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value of a 2×2 matrix.
pub fn operator_norm(m: &[[f64; 2]; 2]) -> f64 {
    let [[a, b], [c, d]] = *m;
    let f2 = a * a + b * b + c * c + d * d;
    let det = a * d - b * c;
    let disc = (f2 * f2 - 4.0 * det * det).max(0.0).sqrt();
    (0.5 * (f2 + disc)).sqrt()
}

fn frame_from_rng(d: usize, rng: &mut ChaCha8Rng) -> EmbeddingFrame {
    let mut gauss = || -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    let normalize = |v: &mut Vec<f64>| {
        let n = dot(v, v).sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut a = gauss();
    normalize(&mut a);
    let mut b = gauss();
    // Two Gram–Schmidt passes keep the rows orthogonal to rounding level.
    for _ in 0..2 {
        let p = dot(&a, &b);
        b.iter_mut().zip(&a).for_each(|(x, y)| *x -= p * y);
        normalize(&mut b);
    }
    EmbeddingFrame { rows: [a, b] }
}

/// Orthonormalized Gaussian rows.
pub fn random_frame(d: usize, seed: u64) -> Result<EmbeddingFrame> {
    if d < 3 {
        return Err(Error::InvalidArgument(format!(
            "d must be at least 3, got {d}"
        )));
    }
    Ok(frame_from_rng(d, &mut rng_for(seed, 0)))
}

#[derive(Clone, Debug, Serialize)]
pub struct FrameFamily {
    pub frames: Vec<EmbeddingFrame>,
    /// ‖U_i U_jᵀ‖_F, row-major count×count.
    pub frobenius: Vec<f64>,
    /// ‖U_i U_jᵀ‖_op, row-major count×count.
    pub operator: Vec<f64>,
    pub max_off_diagonal_frobenius: f64,
}

/// Independent random frames with their measured pairwise overlaps.
pub fn near_orthogonal_family(d: usize, count: usize, seed: u64) -> Result<FrameFamily> {
    if d < 3 {
        return Err(Error::InvalidArgument(format!(
            "d must be at least 3, got {d}"
        )));
    }
    if count > 1000 {
        return Err(Error::InvalidArgument(format!(
            "count must be at most 1000, got {count}"
        )));
    }
    let frames: Vec<EmbeddingFrame> = (0..count)
        .map(|i| frame_from_rng(d, &mut rng_for(seed, i as u64)))
        .collect();
    let mut frobenius = vec![0.0; count * count];
    let mut operator = vec![0.0; count * count];
    let mut max_off = 0.0f64;
    for i in 0..count {
        for j in 0..count {
            let m = frames[i].cross(&frames[j]);
            frobenius[i * count + j] = frobenius_norm(&m);
            operator[i * count + j] = operator_norm(&m);
            if i != j {
                max_off = max_off.max(frobenius[i * count + j]);
            }
        }
    }
    Ok(FrameFamily {
        frames,
        frobenius,
        operator,
        max_off_diagonal_frobenius: max_off,
    })
}

#[derive(Clone, Debug)]
pub struct PlantedInstance {
    pub inst: Instance2D,
    pub frame: EmbeddingFrame,
    pub mu: Vec<f64>,
}

impl PlantedInstance {
    pub fn new(inst: Instance2D, frame: EmbeddingFrame) -> Self {
        let e = inst.params.epsilon;
        let mu = frame.rows[0].iter().map(|x| e * x).collect();
        PlantedInstance { inst, frame, mu }
    }

    pub fn d(&self) -> usize {
        self.frame.d()
    }
}

/// True iff Vw ∉ T×U.
pub fn membership(pi: &PlantedInstance, w: &[f64]) -> bool {
    let (x, y) = pi.frame.project(w);
    !pi.inst.in_removed(x, y)
}

/// log P_{A,V}(w) = log A(Vw) − ((d−2)/2)·log 2π − ½‖w − VᵀVw‖².
pub fn log_density(pi: &PlantedInstance, w: &[f64]) -> f64 {
    let (x, y) = pi.frame.project(w);
    let a = pi.inst.density(x, y);
    let perp2 = dot(w, w) - x * x - y * y;
    a.ln() - (pi.d() - 2) as f64 * LN_SQRT_2PI - 0.5 * perp2
}

/// log[1_S(w) φ_{μ,I}(w) / Z].
pub fn log_truncated_density(pi: &PlantedInstance, w: &[f64]) -> f64 {
    if !membership(pi, w) {
        return f64::NEG_INFINITY;
    }
    let r2: f64 = w.iter().zip(&pi.mu).map(|(a, b)| (a - b) * (a - b)).sum();
    -(pi.d() as f64) * LN_SQRT_2PI - 0.5 * r2 - pi.inst.z.ln()
}

#[derive(Clone, Debug)]
pub struct SampleBatch {
    /// Row-major n×d.
    pub points: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub proposals: u64,
    pub acceptance_rate: f64,
}

impl SampleBatch {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }
}

pub const MAX_SAMPLES: usize = 100_000_000;
const MIN_ACCEPTANCE: f64 = 0.25;

/// Point i: (x, y) ~ N((ε,0), I₂) redrawn while in T×U, then
/// w = Vᵀ(x,y) + (g − VᵀVg) with g ~ N(0, I_d). Stream i of `seed` drives it.
pub fn sample_planted(pi: &PlantedInstance, n: usize, seed: u64) -> Result<SampleBatch> {
    if n > MAX_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "n must be at most {MAX_SAMPLES}, got {n}"
        )));
    }
    let d = pi.d();
    let e = pi.inst.params.epsilon;
    let [r1, r2] = &pi.frame.rows;
    let mut points = vec![0.0; n * d];
    let proposals: u64 = points
        .par_chunks_mut(d.max(1))
        .enumerate()
        .map(|(i, out)| {
            let mut rng = rng_for(seed, i as u64);
            let mut tries = 0u64;
            let (x, y) = loop {
                tries += 1;
                let g: f64 = StandardNormal.sample(&mut rng);
                let x = e + g;
                let y: f64 = StandardNormal.sample(&mut rng);
                if !pi.inst.in_removed(x, y) {
                    break (x, y);
                }
                if tries > 10_000 {
                    break (f64::NAN, f64::NAN);
                }
            };
            for o in out.iter_mut() {
                *o = StandardNormal.sample(&mut rng);
            }
            let (gx, gy) = (dot(r1, out), dot(r2, out));
            for j in 0..d {
                out[j] += (x - gx) * r1[j] + (y - gy) * r2[j];
            }
            tries
        })
        .sum();
    let acceptance_rate = if n == 0 {
        1.0
    } else {
        n as f64 / proposals as f64
    };
    if n > 0 && (acceptance_rate < MIN_ACCEPTANCE || points.iter().any(|v| v.is_nan())) {
        return Err(Error::Acceptance {
            rate: acceptance_rate,
            min: MIN_ACCEPTANCE,
        });
    }
    Ok(SampleBatch {
        points,
        n,
        d,
        seed,
        proposals,
        acceptance_rate,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CorrelationEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub operator_norm: f64,
    pub frobenius_norm: f64,
    pub chi_square: f64,
    /// ‖UVᵀ‖_op^{k+1}·χ²(A, N).
    pub bound: f64,
    /// The 95% interval reaches into [−bound, bound].
    pub consistent: bool,
    /// The interval is wider than the bound scale.
    pub variance_overflow: bool,
    pub n: usize,
}

const MC_CHUNK: usize = 1 << 14;

/// χ_{N(0,I_d)}(P_{A,U}, P_{A,V}) = E_{w∼N(0,I_d)}[R_U(w) R_V(w)] − 1 with
/// R_V(w) = A(Vw)/φ₂(Vw) = e^{εx − ε²/2}·1_S(x,y)/Z at (x,y) = Vw.
pub fn pairwise_correlation_mc(
    inst: &Instance2D,
    f1: &EmbeddingFrame,
    f2: &EmbeddingFrame,
    n: usize,
    seed: u64,
) -> Result<CorrelationEstimate> {
    if n < 100_000 {
        return Err(Error::InvalidArgument(format!(
            "n must be at least 1e5, got {n}"
        )));
    }
    if f1.d() != f2.d() {
        return Err(Error::InvalidArgument(
            "frames live in different dimensions".into(),
        ));
    }
    let d = f1.d();
    let e = inst.params.epsilon;
    let ratio = |x: f64, y: f64| {
        if inst.in_removed(x, y) {
            0.0
        } else {
            (e * x - 0.5 * e * e).exp() / inst.z
        }
    };
    let chunks = n.div_ceil(MC_CHUNK);
    let parts: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_for(seed, c as u64);
            let m = MC_CHUNK.min(n - c * MC_CHUNK);
            let mut w = vec![0.0; d];
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..m {
                for v in w.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let (x1, y1) = f1.project(&w);
                let (x2, y2) = f2.project(&w);
                let v = ratio(x1, y1) * ratio(x2, y2);
                s1 += v;
                s2 += v * v;
            }
            (s1, s2)
        })
        .collect();
    let (s1, s2) = parts.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let nf = n as f64;
    let mean = s1 / nf;
    let se = ((s2 / nf - mean * mean).max(0.0) / nf).sqrt();
    let estimate = mean - 1.0;
    let m = f1.cross(f2);
    let op = operator_norm(&m);
    let chi = chi_square(inst);
    let bound = op.powi(inst.params.k as i32 + 1) * chi;
    let (ci_low, ci_high) = (estimate - 1.96 * se, estimate + 1.96 * se);
    Ok(CorrelationEstimate {
        estimate,
        standard_error: se,
        ci_low,
        ci_high,
        operator_norm: op,
        frobenius_norm: frobenius_norm(&m),
        chi_square: chi,
        bound,
        consistent: ci_low <= bound && ci_high >= -bound,
        variance_overflow: 2.0 * 1.96 * se > bound.max(f64::MIN_POSITIVE) && bound > 0.0,
        n,
    })
}
