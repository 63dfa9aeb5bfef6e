use proptest::prelude::*;
use std::sync::OnceLock;
use tghard::experiment::{direction_gap, mle_objective, normalizer_at, set_aware_mle};
use tghard::gauss::std_normal_cdf;
use tghard::instance::{assemble_instance, verify_instance, Instance2D, InstanceFile};
use tghard::moment_match::build_set_u;
use tghard::planted::{frobenius_norm, operator_norm, random_frame};
use tghard::sample_io::{read_samples, write_samples, SampleFormat};

fn inst() -> &'static Instance2D {
    static I: OnceLock<Instance2D> = OnceLock::new();
    I.get_or_init(|| assemble_instance(0.05, 3, 1).unwrap())
}

#[test]
fn u_half_mass_single_interval_is_symmetric() {
    let u = build_set_u(0.5, 1).unwrap();
    assert_eq!(u.len(), 1);
    let iv = u.intervals()[0];
    assert!(
        (iv.lo + 0.6745).abs() < 1e-4 && (iv.hi - 0.6745).abs() < 1e-4,
        "{iv:?}"
    );
}

#[test]
fn instance_file_round_trip_is_exact() {
    let i = inst();
    let file = InstanceFile::new(i, Some(verify_instance(i).unwrap()));
    let text = serde_json::to_string(&file).unwrap();
    let back: InstanceFile = serde_json::from_str(&text).unwrap();
    assert_eq!(&back.instance().unwrap(), i);
    assert_eq!(serde_json::to_string(&back).unwrap(), text);
}

#[test]
fn population_mle_for_other_instances() {
    for (eps, k) in [(0.02, 2), (0.05, 1), (0.08, 2)] {
        let i = assemble_instance(eps, k, 1).unwrap();
        // Moment matching makes E_A[x] = 0, whose likelihood root is ε.
        assert!((set_aware_mle(&i, i.marginal_x(1).unwrap()) - eps).abs() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn samples_round_trip(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..60), d in 1usize..6) {
        let n = vals.len() / d;
        let pts = &vals[..n * d];
        for fmt in [SampleFormat::Csv, SampleFormat::Bin] {
            let mut buf = Vec::new();
            write_samples(&mut buf, pts, n, d, fmt).unwrap();
            let m = read_samples(&buf[..]).unwrap();
            prop_assert_eq!(m.n, n);
            let bits: Vec<u64> = m.points.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = pts.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, want);
        }
    }

    #[test]
    fn frames_are_orthonormal(d in 3usize..64, seed: u64) {
        let f = random_frame(d, seed).unwrap();
        prop_assert!(f.orthonormality_error() <= 1e-12);
    }

    #[test]
    fn norm_ordering(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, e in -1.0f64..1.0) {
        let m = [[a, b], [c, e]];
        let op = operator_norm(&m);
        let fr = frobenius_norm(&m);
        prop_assert!(op <= fr + 1e-12);
        prop_assert!(fr <= 2f64.sqrt() * op + 1e-12);
    }

    #[test]
    fn frame_aligned_direction_gap(l in 1usize..9, sign in prop::bool::ANY) {
        let h = inst().hermite_moments(8).unwrap();
        let s = if sign { 1.0 } else { -1.0 };
        let g = direction_gap(&h, 9, s, 0.0, l);
        prop_assert!((g - s.powi(l as i32) * h[l * 9]).abs() <= 1e-12);
        let g = direction_gap(&h, 9, 0.0, s, l);
        prop_assert!((g - s.powi(l as i32) * h[l]).abs() <= 1e-12);
    }

    #[test]
    fn mle_is_a_stationary_point(xbar in -0.05f64..0.05) {
        let i = inst();
        let m = set_aware_mle(i, xbar);
        let h = 1e-4;
        let f0 = mle_objective(i, xbar, m);
        prop_assert!(f0 >= mle_objective(i, xbar, m - h));
        prop_assert!(f0 >= mle_objective(i, xbar, m + h));
    }

    #[test]
    fn normalizer_matches_cdf_sum(m in -0.5f64..0.5) {
        let i = inst();
        let t: f64 = i.t_set.intervals().iter().map(|iv| std_normal_cdf(iv.hi - m) - std_normal_cdf(iv.lo - m)).sum();
        let u: f64 = i.u_set.intervals().iter().map(|iv| std_normal_cdf(iv.hi) - std_normal_cdf(iv.lo)).sum();
        prop_assert!((normalizer_at(i, m) - (1.0 - t * u)).abs() <= 1e-14);
    }
}
