use std::fs;
use std::path::Path;
use std::process::Command;

use cipwr::simgen::{Parameters, ScenarioConfig};

fn run(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cipwr")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn toy_analysis(dir: &Path, arm_column: &str, estimators: &str, replicates: usize) -> String {
    fs::write(
        dir.join("toy.csv"),
        "arm,t,c,x\n1,1.0,9,0.1\n1,,9,0.2\n1,7,9,0.3\n2,,9,0.4\n2,2,9,0.5\n2,,3,0.6\n",
    )
    .unwrap();
    let cfg = dir.join("analysis.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"input": "toy.csv", "columns": {{"arm": "{arm_column}", "event_time": "t", "censor_time": "c", "covariates": ["x"]}},
                "horizon": 5, "estimators": {estimators}, "ci": {{"bootstrap_replicates": {replicates}}}, "seed": 3}}"#
        ),
    )
    .unwrap();
    cfg.to_string_lossy().into_owned()
}

#[test]
fn analyze_naive_reproduces_arm_means() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_analysis(dir.path(), "arm", r#"["naive"]"#, 0);
    let out = dir.path().join("out");
    let (code, err) = run(&["analyze", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let text = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "method,quantity,estimate,se,ci_low,ci_high,flags");
    let est: Vec<f64> = lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    // arm 1: (0, 1, 1); arm 2 drops the row censored at 3: (1, 0)
    assert!((est[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((est[1] - 0.5).abs() < 1e-15);
    assert!((est[2] - (2.0 / 3.0 - 0.5)).abs() < 1e-15);
    assert!(out.join("diagnostics.csv").exists());
}

#[test]
fn unknown_column_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_analysis(dir.path(), "treatment_group", r#"["naive"]"#, 0);
    let out = dir.path().join("out");
    let (code, err) = run(&["analyze", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("treatment_group"), "{err}");
}

#[test]
fn analyze_is_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_analysis(dir.path(), "arm", r#"["naive", "ipw", "pseudo_ipw"]"#, 20);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&["analyze", "--config", &cfg, "--out", a.to_str().unwrap(), "--threads", "1"]);
    run(&["analyze", "--config", &cfg, "--out", b.to_str().unwrap(), "--threads", "3"]);
    for f in ["results.csv", "diagnostics.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn degenerate_bootstrap_exits_with_code_4() {
    // arm 2 has two complete cases, so many resamples lose one of its outcome values
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_analysis(dir.path(), "arm", r#"["naive"]"#, 20);
    let out = dir.path().join("out");
    let (code, err) = run(&["analyze", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 4, "{err}");
    assert!(err.contains("bootstrap degenerate"));
    assert!(fs::read_to_string(out.join("results.csv")).unwrap().contains("se_failed"));
}

fn smoke_scenario(dir: &Path) -> String {
    let mut cfg = ScenarioConfig::setting_one_weak();
    cfg.n = 400;
    cfg.nrep = 10;
    cfg.seed = 99;
    cfg.truth_n = 20_000;
    let path = dir.join("scenario.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn simulate_smoke_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_scenario(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let (code, err) = run(&["simulate", "--config", &cfg, "--out", a.to_str().unwrap(), "--threads", "1"]);
    assert_eq!(code, 0, "{err}");
    let (code, _) = run(&["simulate", "--config", &cfg, "--out", b.to_str().unwrap(), "--threads", "8"]);
    assert_eq!(code, 0);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 99);
    assert_eq!(manifest["config"]["seed"], 99);
}

#[test]
fn invalid_scenario_reports_json_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut v = serde_json::to_value(ScenarioConfig::setting_one_weak()).unwrap();
    v["parameters"]["outcome_coefs"][1][2] = serde_json::json!("x");
    fs::write(&path, v.to_string()).unwrap();
    let (code, err) = run(&["simulate", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("/parameters/outcome_coefs/1/2"), "{err}");
}

#[test]
fn truth_examples() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig::setting_one_weak();
    if let Parameters::One(p) = &mut cfg.parameters {
        p.outcome_coefs = vec![[500.0, 0.0, 0.0, 0.0]; 3];
    }
    let path = dir.path().join("far.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = dir.path().join("far");
    let (code, _) = run(&["truth", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--draws", "10000"]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(out.join("truth.csv")).unwrap();
    for line in text.lines().skip(1) {
        let mu: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(mu, 1.0);
    }
}
