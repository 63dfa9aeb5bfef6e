//! Gap experiments on planted samples: Hermite statistics along the hidden
//! frame and along random directions, mean estimators with and without
//! knowledge of the truncation set, and report merging.

use crate::error::{Error, Result};
use crate::gauss::{binomial, gaussian_moment};
use crate::instance::{verify_instance, Instance2D, VerificationReport};
use crate::planted::{random_frame, sample_planted, PlantedInstance, SampleBatch};
use crate::SCHEMA_VERSION;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Exact gaps at or below this count as matched.
pub const GAP_TOL: f64 = 1e-6;
pub const NULL_DIRECTIONS: usize = 100;
/// Acceptance band for the set-aware estimator.
pub const MLE_TOL: f64 = 0.005;

const FRAME_SALT: u64 = 0x5851_f42d_4c95_7f2d;
const NULL_SALT: u64 = 0x1405_7b7e_f767_814f;
const CHUNK: usize = 8192;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub epsilon: f64,
    pub k: usize,
    pub d: usize,
    pub n_samples: usize,
    pub degree_max: usize,
    pub seed: u64,
    pub tau: f64,
}

impl ExperimentConfig {
    pub fn for_instance(
        inst: &Instance2D,
        d: usize,
        n_samples: usize,
        degree_max: usize,
        seed: u64,
        tau: f64,
    ) -> Result<Self> {
        let cfg = ExperimentConfig {
            epsilon: inst.params.epsilon,
            k: inst.params.k,
            d,
            n_samples,
            degree_max,
            seed,
            tau,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 3 {
            return Err(Error::InvalidArgument(format!(
                "d must be at least 3, got {}",
                self.d
            )));
        }
        if self.degree_max == 0 || self.degree_max > 2 * self.k + 2 {
            return Err(Error::InvalidArgument(format!(
                "degree_max must lie in 1..={}, got {}",
                2 * self.k + 2,
                self.degree_max
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// The planted frame used by every command for a given seed. Its key is
/// salted so it never shares a stream with the sampler.
pub fn planted(inst: &Instance2D, d: usize, seed: u64) -> Result<PlantedInstance> {
    Ok(PlantedInstance::new(
        inst.clone(),
        random_frame(d, seed ^ FRAME_SALT)?,
    ))
}

pub fn planted_samples(
    inst: &Instance2D,
    d: usize,
    n: usize,
    seed: u64,
) -> Result<(PlantedInstance, SampleBatch)> {
    let pi = planted(inst, d, seed)?;
    let batch = sample_planted(&pi, n, seed)?;
    Ok((pi, batch))
}

fn hermite_values(x: f64, out: &mut [f64]) {
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = x;
    }
    for n in 1..out.len().saturating_sub(1) {
        out[n + 1] = x * out[n] - n as f64 * out[n - 1];
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit vectors drawn uniformly on the sphere.
pub fn null_directions(d: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NULL_SALT);
    (0..count)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = dot(&v, &v).sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            v
        })
        .collect()
}

/// E_P[He_n(⟨w,u⟩)] for a unit vector u with α = ⟨u,row₁⟩, β = ⟨u,row₂⟩:
/// Σ_{a+b=n} n!/(a!b!) α^a β^b E_A[He_a(x) He_b(y)]. The complement part
/// drops out because its Hermite means vanish.
pub fn direction_gap(hermite: &[f64], width: usize, alpha: f64, beta: f64, n: usize) -> f64 {
    (0..=n)
        .map(|a| {
            binomial(n, a)
                * alpha.powi(a as i32)
                * beta.powi((n - a) as i32)
                * hermite[a * width + n - a]
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatFamily {
    /// He_a(⟨w,row₁⟩)·He_b(⟨w,row₂⟩).
    Planted,
    /// He_ℓ(⟨w,u⟩) for a random unit u.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub degree: usize,
    pub family: StatFamily,
    /// Direction index for random rows, 0 for planted rows.
    pub index: usize,
    pub a: usize,
    pub b: usize,
    /// E_P[q] − E_N(0,I)[q]; the null mean is 0 for every row.
    pub exact_gap: f64,
    pub empirical_gap: f64,
    pub standard_error: f64,
    pub n: usize,
    pub exceeds_tau: bool,
    /// |empirical − exact| ≤ 5 SE.
    pub within_5se: bool,
    /// |empirical| ≤ 5 SE.
    pub zero_within_5se: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub acceptance_rate: f64,
    /// Largest exact planted gap over degrees 1..=k.
    pub max_low_degree_gap: f64,
    pub low_degree_matched: bool,
    /// Exact gap of He_{k+1}(⟨w,row₁⟩).
    pub g_star: f64,
    pub planted_within_5se: bool,
    pub null_within_5se: bool,
    pub statistics_exceeding_tau: usize,
    pub rows: Vec<GapRow>,
}

/// Sums of each statistic and of its square, accumulated over fixed chunks
/// and folded in chunk order.
fn accumulate<F>(points: &[f64], d: usize, width: usize, stat: F) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let parts: Vec<(Vec<f64>, Vec<f64>)> = points
        .par_chunks(CHUNK * d)
        .map(|chunk| {
            let mut s = vec![0.0; width];
            let mut s2 = vec![0.0; width];
            let mut v = vec![0.0; width];
            for w in chunk.chunks_exact(d) {
                stat(w, &mut v);
                for j in 0..width {
                    s[j] += v[j];
                    s2[j] += v[j] * v[j];
                }
            }
            (s, s2)
        })
        .collect();
    let mut s = vec![0.0; width];
    let mut s2 = vec![0.0; width];
    for (a, b) in parts {
        for j in 0..width {
            s[j] += a[j];
            s2[j] += b[j];
        }
    }
    (s, s2)
}

fn mean_se(s: f64, s2: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let m = s / nf;
    (m, ((s2 / nf - m * m).max(0.0) / nf).sqrt())
}

/// Exact and empirical gaps. Refuses instances whose certificates fail.
pub fn run_gap(inst: &Instance2D, cfg: &ExperimentConfig) -> Result<GapReport> {
    cfg.validate()?;
    let report = verify_instance(inst)?;
    if !report.pass {
        return Err(Error::Certificate(
            "instance certificates fail; gap experiment refused".into(),
        ));
    }
    let (pi, batch) = planted_samples(inst, cfg.d, cfg.n_samples, cfg.seed)?;
    gap_from_samples(&pi, &batch.points, cfg, batch.acceptance_rate)
}

pub fn gap_from_samples(
    pi: &PlantedInstance,
    points: &[f64],
    cfg: &ExperimentConfig,
    acceptance_rate: f64,
) -> Result<GapReport> {
    cfg.validate()?;
    let (d, dm, k) = (cfg.d, cfg.degree_max, pi.inst.params.k);
    if pi.d() != d || points.len() != d * cfg.n_samples {
        return Err(Error::InvalidArgument(
            "sample shape disagrees with the config".into(),
        ));
    }
    let n = cfg.n_samples;
    let hw = dm + 1;
    let herm = pi.inst.hermite_moments(dm)?;
    let [r1, r2] = &pi.frame.rows;

    let pairs: Vec<(usize, usize)> = (1..=dm)
        .flat_map(|l| (0..=l).rev().map(move |a| (a, l - a)))
        .collect();
    let dirs = null_directions(d, NULL_DIRECTIONS, cfg.seed);
    let np = pairs.len();
    let width = np + dirs.len() * dm;
    let (s, s2) = accumulate(points, d, width, |w, out| {
        let mut hx = vec![0.0; hw];
        let mut hy = vec![0.0; hw];
        hermite_values(dot(r1, w), &mut hx);
        hermite_values(dot(r2, w), &mut hy);
        for (j, &(a, b)) in pairs.iter().enumerate() {
            out[j] = hx[a] * hy[b];
        }
        for (i, u) in dirs.iter().enumerate() {
            hermite_values(dot(u, w), &mut hx);
            out[np + i * dm..np + (i + 1) * dm].copy_from_slice(&hx[1..]);
        }
    });

    let row = |degree, family, index, a, b, exact: f64, j: usize| {
        let (emp, se) = mean_se(s[j], s2[j], n);
        GapRow {
            degree,
            family,
            index,
            a,
            b,
            exact_gap: exact,
            empirical_gap: emp,
            standard_error: se,
            n,
            exceeds_tau: exact.abs() > cfg.tau,
            within_5se: (emp - exact).abs() <= 5.0 * se,
            zero_within_5se: emp.abs() <= 5.0 * se,
        }
    };
    let mut rows: Vec<GapRow> = pairs
        .iter()
        .enumerate()
        .map(|(j, &(a, b))| row(a + b, StatFamily::Planted, 0, a, b, herm[a * hw + b], j))
        .collect();
    for (i, u) in dirs.iter().enumerate() {
        let (alpha, beta) = (dot(u, r1), dot(u, r2));
        for l in 1..=dm {
            let exact = direction_gap(&herm, hw, alpha, beta, l);
            rows.push(row(
                l,
                StatFamily::Random,
                i,
                l,
                0,
                exact,
                np + i * dm + l - 1,
            ));
        }
    }

    let max_low_degree_gap = pairs
        .iter()
        .filter(|(a, b)| a + b <= k)
        .fold(0.0f64, |m, &(a, b)| m.max(herm[a * hw + b].abs()));
    let g_star = pi.inst.hermite_moments(k + 1)?[(k + 1) * (k + 2)];
    let planted_rows = rows.iter().filter(|r| r.family == StatFamily::Planted);
    Ok(GapReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        acceptance_rate,
        max_low_degree_gap,
        low_degree_matched: max_low_degree_gap <= GAP_TOL,
        g_star,
        planted_within_5se: planted_rows.clone().all(|r| r.within_5se),
        null_within_5se: rows
            .iter()
            .filter(|r| r.family == StatFamily::Random)
            .all(|r| r.within_5se),
        statistics_exceeding_tau: rows.iter().filter(|r| r.exceeds_tau).count(),
        rows,
    })
}

pub fn gap_rows_csv(report: &GapReport) -> String {
    let mut out = String::from(
        "degree,family,index,a,b,exact_gap,empirical_gap,standard_error,n,exceeds_tau,within_5se\n",
    );
    for r in &report.rows {
        let fam = match r.family {
            StatFamily::Planted => "planted",
            StatFamily::Random => "random",
        };
        out.push_str(&format!(
            "{},{fam},{},{},{},{:e},{:e},{:e},{},{},{}\n",
            r.degree,
            r.index,
            r.a,
            r.b,
            r.exact_gap,
            r.empirical_gap,
            r.standard_error,
            r.n,
            r.exceeds_tau,
            r.within_5se
        ));
    }
    out
}

/// Z(m) = 1 − Pr_{N(m,1)}[T]·Pr_{N(0,1)}[U], the mass of S under N(m·row₁, I).
pub fn normalizer_at(inst: &Instance2D, m: f64) -> f64 {
    1.0 - inst.t_set.mass(m) * inst.u_set.mass(0.0)
}

/// Per-sample log-likelihood of N(m·row₁, I, S_d) up to m-free terms,
/// given the mean projection x̄ = mean⟨w,row₁⟩.
pub fn mle_objective(inst: &Instance2D, xbar: f64, m: f64) -> f64 {
    m * xbar - 0.5 * m * m - normalizer_at(inst, m).ln()
}

/// Maximizer of `mle_objective` over m ∈ [−1, 1]: grid of step 1e−3, then
/// golden-section refinement on the neighbouring cells.
pub fn set_aware_mle(inst: &Instance2D, xbar: f64) -> f64 {
    let f = |m: f64| mle_objective(inst, xbar, m);
    let step = 1e-3;
    let best = (0..=2000)
        .map(|i| -1.0 + i as f64 * step)
        .fold((f64::NAN, f64::NEG_INFINITY), |b, m| {
            let v = f(m);
            if v > b.1 {
                (m, v)
            } else {
                b
            }
        })
        .0;
    let (mut a, mut b) = (best - step, best + step);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut e = a + g * (b - a);
    let (mut fc, mut fe) = (f(c), f(e));
    while b - a > 1e-12 {
        if fc > fe {
            b = e;
            e = c;
            fe = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + g * (b - a);
            fe = f(e);
        }
    }
    0.5 * (a + b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    NaiveMean,
    SetAwareMle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRow {
    pub method: Estimator,
    pub n: usize,
    /// ‖μ̂‖.
    pub norm: f64,
    /// ‖μ̂ − μ‖.
    pub error: f64,
    /// ⟨μ̂, row₁⟩.
    pub m_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub epsilon: f64,
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub true_norm: f64,
    pub acceptance_rate: f64,
    /// 3√(d/n).
    pub naive_bound: f64,
    pub naive_within_bound: bool,
    pub mle_within_tolerance: bool,
    pub rows: Vec<EstimatorRow>,
    /// Both estimators on prefixes of length 10³, 10⁴, … and n.
    pub error_vs_n: Vec<EstimatorRow>,
}

fn estimator_rows(pi: &PlantedInstance, sum: &[f64], n: usize) -> [EstimatorRow; 2] {
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let r1 = &pi.frame.rows[0];
    let dist = |v: &[f64]| -> f64 {
        v.iter()
            .zip(&pi.mu)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let xbar = dot(&mean, r1);
    let m = set_aware_mle(&pi.inst, xbar);
    let mle: Vec<f64> = r1.iter().map(|x| m * x).collect();
    [
        EstimatorRow {
            method: Estimator::NaiveMean,
            n,
            norm: dot(&mean, &mean).sqrt(),
            error: dist(&mean),
            m_hat: xbar,
        },
        EstimatorRow {
            method: Estimator::SetAwareMle,
            n,
            norm: m.abs(),
            error: dist(&mle),
            m_hat: m,
        },
    ]
}

pub fn estimate_from_samples(pi: &PlantedInstance, batch: &SampleBatch) -> EstimateReport {
    let (d, n) = (batch.d, batch.n);
    let mut checkpoints: Vec<usize> = std::iter::successors(Some(1000usize), |c| c.checked_mul(10))
        .take_while(|&c| c < n)
        .collect();
    checkpoints.push(n);
    let mut sum = vec![0.0; d];
    let mut error_vs_n = Vec::new();
    let mut next = 0;
    for i in 0..n {
        for (s, v) in sum.iter_mut().zip(batch.row(i)) {
            *s += v;
        }
        if i + 1 == checkpoints[next] {
            error_vs_n.extend(estimator_rows(pi, &sum, i + 1));
            next += 1;
        }
    }
    let rows: Vec<EstimatorRow> = if n == 0 {
        Vec::new()
    } else {
        error_vs_n[error_vs_n.len() - 2..].to_vec()
    };
    let e = pi.inst.params.epsilon;
    let naive_bound = 3.0 * (d as f64 / n.max(1) as f64).sqrt();
    EstimateReport {
        schema_version: SCHEMA_VERSION,
        epsilon: e,
        k: pi.inst.params.k,
        d,
        n,
        seed: batch.seed,
        true_norm: dot(&pi.mu, &pi.mu).sqrt(),
        acceptance_rate: batch.acceptance_rate,
        naive_bound,
        naive_within_bound: rows.first().is_some_and(|r| r.norm <= naive_bound),
        mle_within_tolerance: rows.get(1).is_some_and(|r| (r.m_hat - e).abs() <= MLE_TOL),
        rows,
        error_vs_n,
    }
}

pub fn run_estimate(inst: &Instance2D, d: usize, n: usize, seed: u64) -> Result<EstimateReport> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let (pi, batch) = planted_samples(inst, d, n, seed)?;
    Ok(estimate_from_samples(&pi, &batch))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    /// The verification report exactly as read.
    pub certificates: serde_json::Value,
    pub checks: Vec<Check>,
    pub pass: bool,
}

pub fn summarize(
    certificates: serde_json::Value,
    gap: &GapReport,
    estimate: &EstimateReport,
) -> Result<Summary> {
    let verify: VerificationReport = serde_json::from_value(certificates.clone())?;
    let c = |name: &str, pass: bool, detail: String| Check {
        name: name.into(),
        pass,
        detail,
    };
    let p = &verify.passes;
    let (naive, mle) = (&estimate.rows[0], &estimate.rows[1]);
    let checks = vec![
        c(
            "moment residuals",
            p.moments,
            format!("max {:e}", verify.max_moment_residual),
        ),
        c("mass of S ≥ 1/2", p.mass, format!("Z = {}", verify.mass_s)),
        c("surface area ≤ 1", p.gsa, format!("Γ = {}", verify.gsa)),
        c(
            "chi-square ≤ e^{ε²}/Z² − 1",
            p.chi_square,
            format!("{} ≤ {}", verify.chi_square, verify.chi_square_bound),
        ),
        c(
            "mass of U",
            p.u_mass,
            format!("error {:e}", verify.u_mass_error),
        ),
        c(
            "exact gaps vanish to degree k",
            gap.low_degree_matched,
            format!("max {:e}", gap.max_low_degree_gap),
        ),
        c(
            "g* > 0",
            gap.g_star.abs() > GAP_TOL,
            format!("g* = {:e}", gap.g_star),
        ),
        c(
            "planted empirical gaps within 5 SE",
            gap.planted_within_5se,
            format!("n = {}", gap.config.n_samples),
        ),
        c(
            "null empirical gaps within 5 SE",
            gap.null_within_5se,
            format!("{NULL_DIRECTIONS} directions"),
        ),
        c(
            "naive mean ≤ 3√(d/n)",
            estimate.naive_within_bound,
            format!("‖μ̂‖ = {} vs {}", naive.norm, estimate.naive_bound),
        ),
        c(
            "set-aware MLE within 0.005",
            estimate.mle_within_tolerance,
            format!("m̂ = {} vs ε = {}", mle.m_hat, estimate.epsilon),
        ),
    ];
    let pass = checks.iter().all(|c| c.pass);
    Ok(Summary {
        schema_version: SCHEMA_VERSION,
        certificates,
        checks,
        pass,
    })
}

pub fn summary_text(s: &Summary) -> String {
    let mut out = String::new();
    for c in &s.checks {
        out.push_str(&format!(
            "{} {}: {}\n",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        ));
    }
    out.push_str(&format!(
        "overall: {}\n",
        if s.pass { "PASS" } else { "FAIL" }
    ));
    out
}

/// One row per degree 1..=degree_max.
pub fn gap_vs_degree_csv(gap: &GapReport) -> String {
    let mut out = String::from(
        "degree,max_exact_planted,max_abs_empirical_planted,max_se_planted,max_exact_random,max_abs_empirical_random,exceeds_tau\n",
    );
    for l in 1..=gap.config.degree_max {
        let pick = |fam: StatFamily| {
            gap.rows
                .iter()
                .filter(move |r| r.degree == l && r.family == fam)
        };
        let max = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0f64, |m, v| m.max(v));
        let ep = max(&mut pick(StatFamily::Planted).map(|r| r.exact_gap.abs()));
        let mp = max(&mut pick(StatFamily::Planted).map(|r| r.empirical_gap.abs()));
        let sp = max(&mut pick(StatFamily::Planted).map(|r| r.standard_error));
        let er = max(&mut pick(StatFamily::Random).map(|r| r.exact_gap.abs()));
        let mr = max(&mut pick(StatFamily::Random).map(|r| r.empirical_gap.abs()));
        out.push_str(&format!(
            "{l},{ep:e},{mp:e},{sp:e},{er:e},{mr:e},{}\n",
            ep.max(er) > gap.config.tau
        ));
    }
    out
}

pub fn error_vs_n_csv(est: &EstimateReport) -> String {
    let mut out = String::from("method,n,norm,error,m_hat\n");
    for r in &est.error_vs_n {
        let m = match r.method {
            Estimator::NaiveMean => "naive_mean",
            Estimator::SetAwareMle => "set_aware_mle",
        };
        out.push_str(&format!(
            "{m},{},{:e},{:e},{:e}\n",
            r.n, r.norm, r.error, r.m_hat
        ));
    }
    out
}

/// E[(αx + βy + γg)^m] with g an independent standard normal and
/// E_A[x^i y^j] from `jm` (row-major, width w).
pub fn projected_moment(jm: &[f64], w: usize, alpha: f64, beta: f64, gamma: f64, m: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..=m {
        for j in 0..=m - i {
            let r = m - i - j;
            let coef = binomial(m, i) * binomial(m - i, j);
            total += coef
                * alpha.powi(i as i32)
                * beta.powi(j as i32)
                * gamma.powi(r as i32)
                * jm[i * w + j]
                * gaussian_moment(r);
        }
    }
    total
}
