mod common;

use ndarray::Axis;
use pisa::elementary::{Elementary, ElementaryParams};
use pisa::expr::{Expr, FeatureSet, MAX_FEATURES, MAX_NODES_PER_FEATURE};
use pisa::search::{
    dominates, evolve, hypervolume_2d, ArchiveEntry, FitnessContext, Objectives, ParetoArchive, SearchConfig,
    HV_REFERENCE,
};
use proptest::prelude::*;

fn obj(performance: f64, complexity: usize) -> Objectives {
    Objectives {
        performance,
        complexity,
        valid: true,
    }
}

fn arb_obj() -> impl Strategy<Value = Objectives> {
    (0u32..20, 1usize..12).prop_map(|(p, c)| obj(f64::from(p) / 20.0, c))
}

/// Area of the union of rectangles by sweeping the distinct coordinates.
fn grid_hypervolume(points: &[(f64, f64)], reference: (f64, f64)) -> f64 {
    let mut xs: Vec<f64> = points.iter().map(|p| p.1).chain([reference.1]).collect();
    let mut ys: Vec<f64> = points.iter().map(|p| p.0).chain([reference.0]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut area = 0.0;
    for i in 0..xs.len() - 1 {
        for j in 0..ys.len() - 1 {
            let (cx, cy) = ((xs[i] + xs[i + 1]) / 2.0, (ys[j] + ys[j + 1]) / 2.0);
            if points.iter().any(|p| p.1 <= cx && p.0 <= cy) {
                area += (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j]);
            }
        }
    }
    area
}

proptest! {
    #[test]
    fn dominance_is_a_strict_partial_order(a in arb_obj(), b in arb_obj(), c in arb_obj()) {
        prop_assert!(!dominates(&a, &a));
        prop_assert!(!(dominates(&a, &b) && dominates(&b, &a)));
        if dominates(&a, &b) && dominates(&b, &c) {
            prop_assert!(dominates(&a, &c));
        }
    }

    #[test]
    fn archive_stays_non_dominated(points in prop::collection::vec((arb_obj(), 0u8..3), 1..40)) {
        let mut archive = ParetoArchive::new();
        let mut last_hv = 0.0;
        for (o, k) in &points {
            archive.insert(ArchiveEntry {
                feature_set: FeatureSet::new(vec![Expr::Var(0)]).unwrap(),
                objectives: *o,
                key: format!("k{k}"),
            });
            prop_assert!(archive.is_mutually_non_dominated());
            let hv = archive.hypervolume();
            prop_assert!(hv >= last_hv);
            last_hv = hv;
        }
        // nothing inserted is dominated by the final archive unless it was evicted for a dominating point
        for (o, _) in &points {
            let dominated = archive.entries.iter().any(|e| dominates(&e.objectives, o));
            let present = archive.entries.iter().any(|e| e.objectives == *o);
            prop_assert!(dominated || present);
        }
    }

    #[test]
    fn hypervolume_matches_grid_oracle(points in prop::collection::vec((0u32..20, 1u32..46), 0..12)) {
        let pts: Vec<(f64, f64)> = points.iter().map(|&(l, c)| (f64::from(l) / 20.0, f64::from(c))).collect();
        let hv = hypervolume_2d(&pts, HV_REFERENCE).unwrap();
        prop_assert!((hv - grid_hypervolume(&pts, HV_REFERENCE)).abs() < 1e-9);
    }
}

#[test]
fn hypervolume_reference_examples() {
    assert_eq!(hypervolume_2d(&[], HV_REFERENCE).unwrap(), 0.0);
    assert!((hypervolume_2d(&[(0.5, 1.0)], HV_REFERENCE).unwrap() - 22.5).abs() < 1e-12);
    assert!((hypervolume_2d(&[(0.3, 5.0), (0.4, 3.0)], (0.5, 15.0)).unwrap() - 2.2).abs() < 1e-12);
    assert_eq!(HV_REFERENCE, (1.0, 46.0));
}

#[test]
fn archive_eviction_example() {
    let entry = |p, c, k: &str| ArchiveEntry {
        feature_set: FeatureSet::new(vec![Expr::Var(0)]).unwrap(),
        objectives: obj(p, c),
        key: k.into(),
    };
    let mut a = ParetoArchive::new();
    for (p, c, k) in [(0.60, 5, "a"), (0.65, 7, "b"), (0.80, 12, "c")] {
        assert!(a.insert(entry(p, c, k)));
    }
    assert!(a.insert(entry(0.70, 4, "d")));
    let kept: Vec<&str> = a.sorted().iter().map(|e| e.key.as_str()).collect();
    assert_eq!(kept, vec!["d", "c"]);
}

fn context(ds: &pisa::SurvivalDataset) -> FitnessContext {
    FitnessContext::new(ds, 25, 0.75, Elementary::Cox, ElementaryParams::default(), 4).unwrap()
}

#[test]
fn uninformative_features_score_one_half() {
    let ds = common::exponential_data(200, 2, |x| x[0], 2.0, 1);
    let ctx = context(&ds);
    for text in ["3.5", "x1 / (x1 - x1)"] {
        let fs = FeatureSet::parse(&[text], ds.schema()).unwrap();
        let o = ctx.evaluate(&fs);
        assert!(o.valid);
        assert_eq!(o.performance, 0.5, "{text}");
    }
    let ctx_tree = FitnessContext::new(&ds, 25, 0.75, Elementary::Tree, ElementaryParams::default(), 4).unwrap();
    assert_eq!(ctx_tree.evaluate(&FeatureSet::parse(&["1"], ds.schema()).unwrap()).performance, 0.5);
}

#[test]
fn non_finite_features_are_invalid() {
    let ds = common::exponential_data(200, 2, |x| x[0], 2.0, 1);
    let fs = FeatureSet::parse(&["(x1 + 1e300 * 1e300)"], ds.schema()).unwrap();
    let o = context(&ds).evaluate(&fs);
    assert!(!o.valid);
    assert_eq!(o.performance, 0.0);
}

#[test]
fn strong_single_covariate_matches_direct_oracle() {
    let ds = common::exponential_data(400, 2, |x| 10.0 * x[0], 50.0, 2);
    let ctx = context(&ds);
    let fs = FeatureSet::parse(&["x1"], ds.schema()).unwrap();
    let o = ctx.evaluate(&fs);
    assert!(o.performance > 0.9, "{o:?}");
    assert_eq!(ctx.evaluate(&fs), o);
    assert_eq!(ctx.evaluate_uncached(&fs), o);

    // oracle: direct Cox on the raw column with the brute-force C-index
    let x1 = ds.rows().select(Axis(1), &[0]);
    let mut scores: Vec<f64> = ctx
        .splits
        .iter()
        .map(|(tr, te)| {
            let t = |idx: &[usize]| idx.iter().map(|&i| ds.times()[i]).collect::<Vec<_>>();
            let e = |idx: &[usize]| idx.iter().map(|&i| ds.events()[i]).collect::<Vec<_>>();
            let m = pisa::cox::fit_cox(x1.select(Axis(0), tr).view(), &t(tr), &e(tr), 1.0).unwrap();
            let risk: Vec<f64> = te.iter().map(|&i| m.beta[0] * x1[[i, 0]]).collect();
            common::brute_force_cindex(&risk, &t(te), &e(te)).unwrap()
        })
        .collect();
    scores.sort_by(f64::total_cmp);
    let kept = &scores[6..19];
    let iqm = kept.iter().sum::<f64>() / kept.len() as f64;
    assert!((iqm - o.performance).abs() < 1e-12);
}

fn tiny_config() -> SearchConfig {
    SearchConfig {
        population: 8,
        max_generations: 2,
        stall_generations: 5,
        fitness_splits: 5,
        fitness_train_fraction: 0.75,
    }
}

#[test]
fn toy_search_gives_bounded_non_dominated_archive() {
    let ds = common::exponential_data(120, 3, |x| x[0] - x[1], 2.0, 9);
    for kind in [Elementary::Cox, Elementary::Tree] {
        let r = evolve(&ds, kind, ElementaryParams::default(), &tiny_config(), 3).unwrap();
        assert!(!r.archive.is_empty());
        assert!(r.archive.is_mutually_non_dominated());
        for e in &r.archive.entries {
            assert!(e.feature_set.len() <= MAX_FEATURES);
            assert!(e.feature_set.features.iter().all(|f| f.size() <= MAX_NODES_PER_FEATURE));
        }
        for w in r.history.windows(2) {
            assert!(w[1].hypervolume >= w[0].hypervolume);
        }
    }
}

#[test]
fn search_is_independent_of_worker_count() {
    let ds = common::exponential_data(150, 3, |x| x[0] + x[1] * x[1], 2.0, 5);
    let config = SearchConfig {
        population: 16,
        max_generations: 3,
        ..tiny_config()
    };
    let run = |workers: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
        pool.install(|| evolve(&ds, Elementary::Cox, ElementaryParams::default(), &config, 17).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.archive, b.archive);
    assert_eq!(a.history, b.history);
}
