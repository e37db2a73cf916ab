mod common;

use clinfed::privacy::{default_orders, epsilon_for_training, rdp_step, PrivacyLedger, RdpCurve};
use clinfed::Accountant;
use proptest::prelude::*;

#[test]
fn full_batch_composes_linearly() {
    for z in [0.5, 1.0, 2.0] {
        for steps in [1u64, 10, 100] {
            let curve = RdpCurve::subsampled_gaussian(1.0, z, default_orders()).unwrap().compose(steps);
            for (&a, &eps) in curve.orders().iter().zip(curve.values()) {
                let want = steps as f64 * f64::from(a) / (2.0 * z * z);
                assert!((eps - want).abs() <= 1e-12 * want.max(1.0), "z={z} T={steps} a={a}");
            }
        }
    }
}

#[test]
fn subsampled_step_matches_quadrature() {
    for q in [0.01, 0.05] {
        for z in [0.5, 1.0, 2.0] {
            for alpha in [2u32, 8, 32] {
                let got = rdp_step(q, z, alpha).unwrap();
                let want = common::sampled_gaussian_rdp_quadrature(q, z, alpha);
                let rel = (got - want).abs() / want.abs();
                assert!(rel < 1e-3, "q={q} z={z} a={alpha}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn quadrature_reproduces_full_batch() {
    // sanity of the oracle itself on the closed-form case
    for alpha in [2u32, 8] {
        let q = 1.0 - 1e-12;
        let want = f64::from(alpha) / 2.0;
        let got = common::sampled_gaussian_rdp_quadrature(q, 1.0, alpha);
        assert!((got - want).abs() / want < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn conversion_anchor() {
    let ledger = epsilon_for_training(&Accountant::new(1.0, 1.0, 1, 1e-5)).unwrap();
    assert!((ledger.epsilon - 5.302585).abs() < 1e-5, "{}", ledger.epsilon);
    assert_eq!(ledger.order, 6);
}

#[test]
fn no_steps_cost_only_the_conversion_term() {
    let ledger = epsilon_for_training(&Accountant::new(0.1, 1.0, 0, 1e-5)).unwrap();
    let want = (1e5f64).ln() / 63.0;
    assert!((ledger.epsilon - want).abs() < 1e-12);
    assert_eq!(ledger.order, 64);
}

#[test]
fn ledger_advances_match_one_shot() {
    let mut ledger = PrivacyLedger::open("s", Accountant::new(0.02, 1.1, 0, 1e-5)).unwrap();
    for _ in 0..5 {
        ledger.advance(50).unwrap();
    }
    let once = epsilon_for_training(&Accountant::new(0.02, 1.1, 250, 1e-5)).unwrap();
    assert_eq!(ledger.steps(), 250);
    assert!((ledger.epsilon - once.epsilon).abs() < 1e-12);
}

#[test]
fn invalid_parameters_are_rejected() {
    assert!(epsilon_for_training(&Accountant::new(1.5, 1.0, 1, 1e-5)).is_err());
    assert!(epsilon_for_training(&Accountant::new(0.1, 0.0, 1, 1e-5)).is_err());
    assert!(epsilon_for_training(&Accountant::new(0.1, 1.0, 1, 0.0)).is_err());
    let mut bad_orders = Accountant::new(0.1, 1.0, 1, 1e-5);
    bad_orders.orders = vec![1, 2];
    assert!(epsilon_for_training(&bad_orders).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn epsilon_grows_with_steps(q in 0.001f64..1.0, z in 0.3f64..5.0, steps in 1u64..2000) {
        let a = epsilon_for_training(&Accountant::new(q, z, steps, 1e-5)).unwrap().epsilon;
        let b = epsilon_for_training(&Accountant::new(q, z, 2 * steps, 1e-5)).unwrap().epsilon;
        prop_assert!(b >= a);
    }

    #[test]
    fn step_cost_orders(q in 0.001f64..0.5, z in 0.3f64..5.0, alpha in 2u32..64) {
        let base = rdp_step(q, z, alpha).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!(rdp_step((q * 1.5).min(1.0), z, alpha).unwrap() >= base);
        prop_assert!(rdp_step(q, z * 1.5, alpha).unwrap() <= base);
        prop_assert!(rdp_step(q, z, alpha + 1).unwrap() >= base);
        prop_assert!(base <= f64::from(alpha) / (2.0 * z * z) * (1.0 + 1e-12));
    }
}
