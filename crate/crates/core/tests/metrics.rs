use csi_llm_core::eval::{batch_nmse, nmse, nmse_with, to_db, NmseKind};
use proptest::prelude::*;

/// Scalar-loop NMSE written independently of the library.
fn oracle(actual: &[f32], predicted: &[f32]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    let mut i = 0;
    while i < actual.len() {
        let a = actual[i] as f64;
        let d = a - predicted[i] as f64;
        num += d * d;
        den += a * a;
        i += 1;
    }
    num / den
}

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(-100.0f32..100.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn matches_scalar_oracle((a, p) in (1usize..64).prop_flat_map(|n| (finite_vec(n), finite_vec(n)))) {
        prop_assume!(a.iter().any(|v| *v != 0.0));
        let ours = nmse(&a, &p).unwrap();
        let reference = oracle(&a, &p);
        prop_assert!((ours.linear - reference).abs() <= 1e-9 * reference.max(1e-300));
        prop_assert!((ours.db - 10.0 * reference.max(1e-12).log10()).abs() < 1e-9);
    }

    #[test]
    fn scale_invariant(
        (a, p) in (1usize..32).prop_flat_map(|n| (finite_vec(n), finite_vec(n))),
        k in prop_oneof![Just(2.0f32), Just(-4.0), Just(0.5), Just(-0.25)],
    ) {
        prop_assume!(a.iter().any(|v| *v != 0.0));
        // Powers of two scale every float exactly.
        let sa: Vec<f32> = a.iter().map(|v| v * k).collect();
        let sp: Vec<f32> = p.iter().map(|v| v * k).collect();
        prop_assert_eq!(nmse(&sa, &sp).unwrap().linear, nmse(&a, &p).unwrap().linear);
    }

    #[test]
    fn nonnegative_and_zero_iff_equal((a, p) in (1usize..32).prop_flat_map(|n| (finite_vec(n), finite_vec(n)))) {
        prop_assume!(a.iter().any(|v| *v != 0.0));
        let v = nmse(&a, &p).unwrap().linear;
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v == 0.0, a == p);
        prop_assert_eq!(nmse(&a, &a).unwrap().linear, 0.0);
    }

    #[test]
    fn literal_is_root_of_squared((a, p) in (1usize..32).prop_flat_map(|n| (finite_vec(n), finite_vec(n)))) {
        prop_assume!(a.iter().any(|v| *v != 0.0));
        let sq = nmse(&a, &p).unwrap().linear;
        let lit = nmse_with(&a, &p, NmseKind::Literal).unwrap().linear;
        prop_assert!((lit * lit - sq).abs() <= 1e-12 * sq.max(1.0));
    }
}

#[test]
fn batch_is_mean_of_linear_values() {
    let a = [1.0f32, 0.0, 0.0, 2.0];
    let p = [0.0f32, 0.0, 0.0, 1.0];
    // Per-sample linear NMSE 1 and 0.25.
    let b = batch_nmse(&a, &p, 2, NmseKind::Squared).unwrap();
    assert_eq!(b.linear, 0.625);
    assert_eq!(b.db, to_db(0.625));
}
