mod common;

use std::fs;
use std::path::Path;

use pisa::elementary::{Elementary, ElementaryParams};
use pisa::pipeline::{
    evaluate_fixture, flowchart_dot, km_csv, run_pipeline, Manifest, PipelineConfig,
};
use pisa::stats;

fn toy_config(dir: &Path) -> PipelineConfig {
    let internal = common::exponential_data(150, 3, |x| 2.0 * x[0] + x[1], 3.0, 31);
    let external = common::exponential_data(120, 3, |x| 2.0 * x[0] + x[1], 3.0, 32);
    internal.save_csv(&dir.join("internal.csv")).unwrap();
    external.save_csv(&dir.join("external.csv")).unwrap();
    let mut config = PipelineConfig::new(internal.schema().clone(), dir.join("internal.csv"));
    config.external_path = Some(dir.join("external.csv"));
    config.reps = 2;
    config.population = 8;
    config.max_generations = 2;
    config.stall_generations = 1;
    config.fitness_splits = 4;
    config.bootstrap_n = 30;
    config.seed = 11;
    config
}

fn read_all(dir: &Path, files: &[String]) -> Vec<(String, Vec<u8>)> {
    files
        .iter()
        .map(|f| (f.clone(), fs::read(dir.join(f)).unwrap()))
        .collect()
}

#[test]
fn toy_run_writes_manifested_artifacts_deterministically() {
    let data = tempfile::tempdir().unwrap();
    let config = toy_config(data.path());
    let out_a = tempfile::tempdir().unwrap();
    let summary = run_pipeline(&config, out_a.path()).unwrap();
    assert_eq!(summary.results.len(), 2);
    assert!(!out_a.path().join("FAILED").exists());

    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(out_a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.seed, 11);
    assert_eq!(manifest.config_sha256, config.hash());
    assert!(manifest.files.contains(&"archive.json".to_string()));
    for f in &manifest.files {
        assert!(out_a.path().join(f).is_file(), "{f} missing");
    }
    for id in &summary.archive.selected {
        for f in [
            format!("flowcharts/{id}.dot"),
            format!("km/{id}_internal.csv"),
            format!("km/{id}_external.csv"),
            format!("km/{id}.svg"),
        ] {
            assert!(manifest.files.contains(&f), "{f} not in manifest");
        }
    }
    if !summary.selected.is_empty() {
        assert!(manifest.files.contains(&"importance.csv".to_string()));
    }

    let out_b = tempfile::tempdir().unwrap();
    run_pipeline(&config, out_b.path()).unwrap();
    let mut files = manifest.files.clone();
    files.push("manifest.json".into());
    assert_eq!(read_all(out_a.path(), &files), read_all(out_b.path(), &files));
}

#[test]
fn failure_leaves_a_marker() {
    let data = tempfile::tempdir().unwrap();
    let mut config = toy_config(data.path());
    config.internal_path = data.path().join("missing.csv");
    let out = tempfile::tempdir().unwrap();
    assert!(run_pipeline(&config, out.path()).is_err());
    let marker = fs::read_to_string(out.path().join("FAILED")).unwrap();
    assert!(marker.contains("load"), "{marker}");
    assert!(!out.path().join("manifest.json").exists());

    let mut config = toy_config(data.path());
    config.reps = 0;
    let out = tempfile::tempdir().unwrap();
    let err = run_pipeline(&config, out.path()).unwrap_err();
    assert!(matches!(err.root(), pisa::Error::Config(_)), "{err}");
    assert!(out.path().join("FAILED").exists());
}

#[test]
fn single_group_flowchart_is_one_leaf() {
    let ds = common::exponential_data(100, 1, |_| 0.0, 3.0, 2);
    let (report, strat) =
        evaluate_fixture(&["1"], Elementary::Cox, &ElementaryParams::default(), &ds, None, 20, 1).unwrap();
    assert_eq!(report.stratification.n_groups, 1);
    let dot = flowchart_dot(&strat, "months");
    assert_eq!(dot.matches("shape=").count(), 1);
    assert!(!dot.contains("->"));
    assert!(dot.contains("Group A"));
}

#[test]
fn flowchart_rendering_matches_the_chart() {
    let ds = common::exponential_data(300, 2, |x| 3.0 * x[0], 3.0, 5);
    let (_, strat) =
        evaluate_fixture(&["x1", "x2"], Elementary::Tree, &ElementaryParams::default(), &ds, None, 20, 1).unwrap();
    let dot = flowchart_dot(&strat, "months");
    let decisions = strat.flowchart.nodes.len() - strat.flowchart.n_leaves();
    assert_eq!(dot.matches("shape=box").count(), decisions);
    assert_eq!(dot.matches("shape=ellipse").count(), strat.flowchart.n_leaves());
    assert_eq!(dot.matches("->").count(), 2 * decisions);
    for g in &strat.groups {
        assert!(dot.contains(&format!("Group {}", g.label)));
    }
}

#[test]
fn km_csv_rows() {
    let curve = stats::kaplan_meier(&[1.0, 2.0, 4.0, 5.0], &[true, true, true, false]).unwrap();
    let csv = km_csv(&[("A".into(), curve)]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "group_label,time,survival,ci_lower,ci_upper,n_at_risk");
    assert_eq!(lines.len(), 1 + 1 + 3 + 1);
    assert_eq!(lines[1], "A,0,1,1,1,4");
    let row = |k: usize| lines[k].split(',').collect::<Vec<_>>();
    assert_eq!(row(2)[1..3], ["1", "0.75"]);
    assert_eq!(row(3)[1..3], ["2", "0.5"]);
    assert_eq!(row(4)[1..3], ["4", "0.25"]);
    assert_eq!(row(5)[1..3], ["5", "0.25"]);
    assert_eq!(row(5)[5], "1");
}
