mod common;

use ndarray::Array2;
use pisa::dataset::SurvivalDataset;
use pisa::elementary::{Elementary, ElementaryParams, FittedModel};
use pisa::expr::FeatureSet;
use pisa::stratify::{
    fit_rule_tree, merge_groups, stratification_cindex, stratification_risks, stratify, stratify_agnostic,
    StratificationModel, StratifyConfig,
};
use pisa::stats;

fn sorted_partition(groups: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut g: Vec<Vec<usize>> = groups
        .iter()
        .map(|m| {
            let mut m = m.clone();
            m.sort_unstable();
            m
        })
        .collect();
    g.sort();
    g
}

/// Three groups of 60: two with the same hazard, one with a tenfold hazard.
fn three_groups() -> (Vec<Vec<usize>>, Vec<f64>, Vec<bool>) {
    let ds = common::exponential_data(180, 1, |_| 0.0, 1e9, 3);
    let mut times = ds.times().to_vec();
    for t in &mut times[120..] {
        *t /= 10.0;
    }
    let groups = vec![(0..60).collect(), (60..120).collect(), (120..180).collect()];
    (groups, times, ds.events().to_vec())
}

#[test]
fn merging_joins_similar_groups_only() {
    let (groups, times, events) = three_groups();
    let out = merge_groups(groups, &times, &events, 0.05);
    assert_eq!(out.groups.len(), 2);
    assert_eq!(out.iterations, 1);
    assert_eq!(out.sources, vec![vec![0, 1], vec![2]]);
    let t = |g: &[usize]| g.iter().map(|&i| times[i]).collect::<Vec<_>>();
    let e = |g: &[usize]| g.iter().map(|&i| events[i]).collect::<Vec<_>>();
    let (a, b) = (&out.groups[0], &out.groups[1]);
    let lr = stats::logrank_test(&t(a), &e(a), &t(b), &e(b)).unwrap();
    assert!(lr.p_value < 0.05);
}

#[test]
fn merging_ignores_input_order() {
    let (groups, times, events) = three_groups();
    let forward = merge_groups(groups.clone(), &times, &events, 0.05);
    let mut reversed = groups;
    reversed.reverse();
    let backward = merge_groups(reversed, &times, &events, 0.05);
    assert_eq!(sorted_partition(&forward.groups), sorted_partition(&backward.groups));
}

#[test]
fn median_risk_and_restricted_mean_fallback() {
    let times = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
    let events = [true, true, true, true, true, false, false, false];
    let groups = vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]];
    let risks = stratification_risks(&groups, &times, &events, 8.0).unwrap();
    assert_eq!(risks[0].1.risk, 2.0);
    assert!(!risks[0].1.is_rmst);
    // S = 0.75 on [5, 8]
    assert!(risks[1].1.is_rmst);
    assert!((risks[1].1.risk - (5.0 + 0.75 * 3.0)).abs() < 1e-12);
}

fn check_partition(strat: &StratificationModel, ds: &SurvivalDataset) {
    let mut all: Vec<usize> = strat.groups.iter().flat_map(|g| g.members.clone()).collect();
    all.sort_unstable();
    assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
    let assigned = strat.assign(ds).unwrap();
    for (g, group) in strat.groups.iter().enumerate() {
        assert!(group.members.iter().all(|&i| assigned[i] == g));
        for &i in &group.members {
            assert!(group.rule.matches(strat.feature_set.transform(ds.rows().view()).unwrap().row(i)));
        }
    }
    for w in strat.groups.windows(2) {
        assert!(w[0].risk >= w[1].risk);
    }
    let labels: Vec<&str> = strat.groups.iter().map(|g| g.label.as_str()).collect();
    let expected: Vec<String> = (0..labels.len()).map(pisa::stratify::group_label).collect();
    assert_eq!(labels, expected);
}

fn fitted(kind: Elementary, ds: &SurvivalDataset, exprs: &[&str]) -> (FeatureSet, FittedModel) {
    let fs = FeatureSet::parse(exprs, ds.schema()).unwrap();
    let x = fs.transform(ds.rows().view()).unwrap();
    let model = FittedModel::fit(kind, &ElementaryParams::default(), x.view(), ds.times(), ds.events()).unwrap();
    (fs, model)
}

#[test]
fn tree_stratification_is_a_faithful_partition() {
    let ds = common::exponential_data(400, 2, |x| 2.0 * x[0] - x[1], 3.0, 12);
    let (fs, model) = fitted(Elementary::Tree, &ds, &["x1", "x2"]);
    let strat = stratify(&model, &fs, &ds, &StratifyConfig::default()).unwrap();
    assert_eq!(strat.fidelity, 1.0);
    assert!(strat.warnings.is_empty());
    assert!(strat.groups.len() >= 2);
    assert!(strat.groups.len() <= strat.initial_groups);
    check_partition(&strat, &ds);
    assert!(stratification_cindex(&strat, &ds).unwrap() > 0.6);
}

#[test]
fn cox_and_agnostic_stratifications_are_partitions() {
    let ds = common::exponential_data(400, 2, |x| 2.0 * x[0], 3.0, 13);
    let (fs, model) = fitted(Elementary::Cox, &ds, &["x1", "x2"]);
    let strat = stratify(&model, &fs, &ds, &StratifyConfig::default()).unwrap();
    assert_eq!(strat.initial_groups, 6);
    check_partition(&strat, &ds);
    let agnostic = stratify_agnostic(&fs, &ds, &StratifyConfig::default()).unwrap();
    check_partition(&agnostic, &ds);
}

#[test]
fn uninformative_feature_gives_single_group() {
    let ds = common::exponential_data(200, 1, |_| 0.0, 3.0, 4);
    let (fs, model) = fitted(Elementary::Cox, &ds, &["1"]);
    let strat = stratify(&model, &fs, &ds, &StratifyConfig::default()).unwrap();
    assert_eq!(strat.groups.len(), 1);
    assert_eq!(strat.groups[0].label, "A");
    assert_eq!(stratification_cindex(&strat, &ds).unwrap(), 0.5);
}

#[test]
fn non_finite_features_cannot_be_assigned() {
    let ds = common::exponential_data(200, 1, |x| x[0], 3.0, 4);
    let (fs, model) = fitted(Elementary::Cox, &ds, &["x1"]);
    let strat = stratify(&model, &fs, &ds, &StratifyConfig::default()).unwrap();
    let fs_log = FeatureSet::parse(&["x1 * 1e300 * 1e300"], ds.schema()).unwrap();
    let broken = StratificationModel { feature_set: fs_log, ..strat };
    assert!(broken.assign(&ds).is_err());
}

#[test]
fn conflicting_labels_lower_rule_fidelity() {
    let x = Array2::from_shape_fn((20, 1), |(i, _)| (i / 2) as f64);
    let classes: Vec<usize> = (0..20).map(|i| i % 2).collect();
    let chart = fit_rule_tree(x.view(), &classes);
    let agree = (0..20).filter(|&i| chart.assign(x.row(i)) == classes[i]).count();
    assert_eq!(agree, 10);
}
