use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn calidro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calidro"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn small_single_item() -> Value {
    json!({
        "problem": {"kind": "newsvendor", "cost": [1.0], "price": [2.0], "eps": [1.0],
                    "groups": [[0]], "demand": {"kind": "exponential", "mean": 10.0}},
        "method": "robust",
        "n": 300,
        "replicates": 12,
        "master_seed": 5
    })
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn calibrate_prints_the_squared_quantile() {
    let o = calidro(&["calibrate", "--alpha", "0.05"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rho: f64 = stdout(&o).trim().parse().unwrap();
    assert!((rho - 2.705543).abs() < 1e-5, "{rho}");
}

#[test]
fn calibrate_rejects_a_level_outside_its_domain() {
    let o = calidro(&["calibrate", "--alpha", "0.7"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_config_exits_one_naming_the_key() {
    let o = calidro(&["solve"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("config"), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = calidro(&["solve", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_one_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_single_item();
    v["solver"] = json!({"dual_toll": 1e-3});
    let cfg = write_config(dir.path(), "c.json", &v);
    let o = calidro(&["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("solver") && err.contains("dual_toll"), "{err}");
}

#[test]
fn unknown_subcommand_is_rejected() {
    let o = calidro(&["plot"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn solver_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small_single_item());
    let o = calidro(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "solver.dual_max_iter=1",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn solve_reports_one_replicate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small_single_item());
    let out = dir.path().join("out");
    let o = calidro(&["solve", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(report["replicate"], 0);
    assert_eq!(report["theta_hat"].as_array().unwrap().len(), 1);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn simulate_newsvendor_writes_five_rows_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small_single_item());
    let first = dir.path().join("first");
    let o = calidro(&[
        "simulate-newsvendor",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        first.to_str().unwrap(),
        "--parallel",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(first.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6, "{csv}");
    assert!(lines[0].starts_with("alpha,rho,constraint_id,satisfied"));
    let alphas: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(alphas, vec![0.4, 0.25, 0.1, 0.05, 0.005]);

    let manifest = first.join("manifest.json");
    let m: Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["subcommand"], "simulate-newsvendor");
    assert_eq!(m["master_seed"], 5);
    assert_eq!(m["replicate_seeds"].as_array().unwrap().len(), 12);
    assert!(m["versions"]["calidro"].is_string());

    let second = dir.path().join("second");
    let o = calidro(&[
        "simulate-newsvendor",
        "--config",
        manifest.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
        "--parallel",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(first.join("results.csv")).unwrap(),
        std::fs::read(second.join("results.csv")).unwrap()
    );
}

#[test]
fn overrides_beat_file_values_and_flags_beat_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small_single_item());
    let out = dir.path().join("out");
    let o = calidro(&[
        "theorem-check",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "replicates=4",
        "--set",
        "master_seed=11",
        "--seed",
        "12",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["replicates"], 4);
    assert_eq!(m["config"]["master_seed"], 12);
    let check: Value = serde_json::from_str(&std::fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(check["standardized"].as_array().unwrap().len(), 4);
    assert!(stdout(&o).contains("standardized mean"));
}

#[test]
fn malformed_override_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small_single_item());
    let o = calidro(&["solve", "--config", cfg.to_str().unwrap(), "--set", "replicates"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("key=value"), "{}", stderr(&o));
}

#[test]
fn fairness_run_on_a_csv_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let mut text = String::from("age,colour,sex,income\n");
    for i in 0..400 {
        let age = 20 + (i * 7) % 50;
        let colour = ["red", "blue", "green"][i % 3];
        let sex = if i % 3 == 0 { "F" } else { "M" };
        let income = if (age > 45) ^ (i % 11 == 0) { ">50K" } else { "<=50K" };
        text.push_str(&format!("{age},{colour},{sex},{income}\n"));
    }
    std::fs::write(&data, text).unwrap();
    let schema = write_config(
        dir.path(),
        "schema.json",
        &json!({
            "label": {"column": "income", "positive": ">50K"},
            "group": {"column": "sex", "positive": "M"},
            "numeric": ["age"],
            "categorical": ["colour"]
        }),
    );
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({
            "problem": {"kind": "fairness",
                        "dataset": {"source": "csv", "path": data, "schema": schema},
                        "constraint": {"epsilon": 0.05}},
            "method": "saa",
            "replicates": 3,
            "master_seed": 2
        }),
    );
    let out = dir.path().join("out");
    let o = calidro(&["fairness-run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let freq = std::fs::read_to_string(out.join("frequencies.csv")).unwrap();
    assert_eq!(freq.lines().count(), 4, "{freq}");
    assert!(freq.lines().last().unwrap().starts_with("joint,"));
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 7);
}

#[test]
fn fairness_run_refuses_a_newsvendor_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small_single_item());
    let o = calidro(&["fairness-run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("problem.kind"));
}

#[test]
fn calibrate_with_a_joint_config_prints_common_radii() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &json!({
            "problem": {"kind": "newsvendor", "cost": [1.0, 1.0, 1.0, 1.0], "price": [2.0, 2.0, 2.0, 2.0],
                        "eps": [1.0, 1.0], "groups": [[0, 1], [2, 3]],
                        "demand": {"kind": "gaussian", "mean": 10.0, "variance": 9.0, "correlation": 0.0}},
            "method": "robust",
            "calibration": {"mode": "joint", "level": 0.9025},
            "n": 1000,
            "replicates": 1
        }),
    );
    let out = dir.path().join("out");
    let o = calidro(&["calibrate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let radii: Vec<f64> = stdout(&o).split_whitespace().map(|t| t.parse().unwrap()).collect();
    assert_eq!(radii.len(), 2);
    assert_eq!(radii[0], radii[1]);
    // Near-independent constraints: close to z²_{0.05}.
    assert!((radii[0] - 2.7055).abs() < 0.4, "{radii:?}");
}
