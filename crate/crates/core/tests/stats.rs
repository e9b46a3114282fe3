mod common;

use pisa::stats::{self, concordance_index, kaplan_meier, logrank_test, median_survival};
use proptest::prelude::*;

fn cohort(max_n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (2..=max_n).prop_flat_map(|n| {
        (
            prop::collection::vec(0i32..8, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(1i32..15, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn cindex_matches_brute_force((risks, times, events) in cohort(50)) {
        let fast = concordance_index(&risks, &times, &events).ok();
        prop_assert_eq!(fast, common::brute_force_cindex(&risks, &times, &events));
    }

    #[test]
    fn cindex_antisymmetric((risks, times, events) in cohort(40)) {
        if let Ok(c) = concordance_index(&risks, &times, &events) {
            let neg: Vec<f64> = risks.iter().map(|r| -r).collect();
            let c_neg = concordance_index(&neg, &times, &events).unwrap();
            prop_assert!((c + c_neg - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cindex_invariant_under_monotone_risk_transform((risks, times, events) in cohort(40)) {
        let warped: Vec<f64> = risks.iter().map(|r| (r / 3.0).exp() + 7.0).collect();
        prop_assert_eq!(
            concordance_index(&risks, &times, &events).ok(),
            concordance_index(&warped, &times, &events).ok()
        );
    }

    #[test]
    fn km_matches_product_limit((_, times, events) in cohort(40)) {
        let curve = kaplan_meier(&times, &events).unwrap();
        for t in 0..16 {
            let t = f64::from(t) + 0.5;
            prop_assert!((curve.at(t) - common::product_limit(&times, &events, t)).abs() < 1e-12);
        }
        for w in curve.survival.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        for k in 0..curve.times.len() {
            prop_assert!(curve.ci_lower[k] <= curve.survival[k] && curve.survival[k] <= curve.ci_upper[k]);
        }
    }

    #[test]
    fn logrank_matches_table_and_is_time_monotone_invariant(
        (_, t1, e1) in cohort(25),
        (_, t2, e2) in cohort(25),
    ) {
        if let Ok(r) = logrank_test(&t1, &e1, &t2, &e2) {
            let a: Vec<(f64, bool)> = t1.iter().copied().zip(e1.iter().copied()).collect();
            let b: Vec<(f64, bool)> = t2.iter().copied().zip(e2.iter().copied()).collect();
            let oracle = common::logrank_oracle(&a, &b);
            if oracle.is_finite() {
                prop_assert!((r.statistic - oracle).abs() <= 1e-9 * oracle.max(1.0));
            }
            let warp = |t: &[f64]| t.iter().map(|v| v.powi(3) + 1.0).collect::<Vec<_>>();
            let w = logrank_test(&warp(&t1), &e1, &warp(&t2), &e2).unwrap();
            prop_assert!((r.statistic - w.statistic).abs() <= 1e-9 * r.statistic.max(1.0));
            let swapped = logrank_test(&t2, &e2, &t1, &e1).unwrap();
            prop_assert!((r.statistic - swapped.statistic).abs() <= 1e-9 * r.statistic.max(1.0));
            prop_assert!((0.0..=1.0).contains(&r.p_value));
        }
    }
}

#[test]
fn km_worked_example() {
    let curve = kaplan_meier(&[1.0, 2.0, 3.0, 4.0], &[true, true, false, true]).unwrap();
    assert_eq!(curve.times, vec![1.0, 2.0, 4.0]);
    assert_eq!(curve.survival, vec![0.75, 0.5, 0.0]);
    assert_eq!(median_survival(&curve), Some(2.0));
}

#[test]
fn km_all_censored_is_flat() {
    let curve = kaplan_meier(&[1.0, 5.0], &[false, false]).unwrap();
    assert!(curve.times.is_empty());
    assert_eq!(curve.at(10.0), 1.0);
    assert_eq!(median_survival(&curve), None);
    assert_eq!(curve.restricted_mean(5.0), 5.0);
}

#[test]
fn logrank_identical_groups() {
    let t = [1.0, 2.0, 3.0, 4.0, 5.0];
    let e = [true, false, true, true, false];
    let r = logrank_test(&t, &e, &t, &e).unwrap();
    assert_eq!(r.statistic, 0.0);
    assert_eq!(r.p_value, 1.0);
}

#[test]
fn iqm_and_quantiles() {
    let v: Vec<f64> = (1..=8).map(f64::from).collect();
    assert_eq!(stats::interquartile_mean(&v).unwrap(), 4.5);
    assert!(stats::interquartile_mean(&[1.0, 2.0]).is_err());
    assert_eq!(stats::quantile_sorted(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
}
