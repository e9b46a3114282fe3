use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/gbsg")
}

/// A copy of the bundled config with absolute data paths and cheap settings.
fn write_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let text = fs::read_to_string(data_dir().join("config.json")).unwrap();
    let mut config: serde_json::Value = serde_json::from_str(&text).unwrap();
    config["internal_path"] = data_dir().join("internal.csv").to_string_lossy().into();
    config["external_path"] = data_dir().join("external.csv").to_string_lossy().into();
    config["bootstrap_n"] = 20.into();
    config["reps"] = 1.into();
    config["population"] = 8.into();
    config["max_generations"] = 1.into();
    config["fitness_splits"] = 3.into();
    edit(&mut config);
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string(&config).unwrap()).unwrap();
    path
}

fn pisa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pisa"))
        .args(args)
        .env_remove("PISA_SEED")
        .output()
        .unwrap()
}

#[test]
fn fixture_prints_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |_| {});
    let out = pisa(&["fixture", "--config", config.to_str().unwrap(), "--expr", "x_nodes", "--expr", "x_PGR"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["expressions"].as_array().unwrap().len(), 2);
    assert!(report["internal_cindex"].as_f64().unwrap() > 0.5);
}

#[test]
fn configuration_and_expression_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |_| {});
    let c = config.to_str().unwrap();
    assert_eq!(pisa(&["fixture", "--config", c, "--expr", "x_nodes +"]).status.code(), Some(1));
    assert_eq!(pisa(&["fixture", "--config", c, "--expr", "x_unknown"]).status.code(), Some(1));

    let bad = write_config(dir.path(), |v| v["population"] = 0.into());
    assert_eq!(pisa(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |v| {
        v["internal_path"] = "/nonexistent/internal.csv".into();
    });
    let out = pisa(&["fixture", "--config", config.to_str().unwrap(), "--expr", "x_nodes"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |_| {});
    let out_dir = dir.path().join("out");
    let out = pisa(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "3",
        "--workers",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("manifest.json").is_file());
    let report = pisa(&["report", out_dir.to_str().unwrap()]);
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("1 repetitions"));
}
