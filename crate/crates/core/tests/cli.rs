use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn bdlab(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bdlab"));
    cmd.args(args).env_remove("BDLAB_OUTPUT_DIR");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn config(experiment: &str) -> String {
    format!(
        r#"{{
  "schema": "bdlab/1",
  "space": [0.5, 1.5],
  "mixing": {{"kind": "gamma", "shape": 2, "rate": 3}},
  "battery": [{{"kind": "exp_neg", "h": [0.3, 1.0]}}, {{"kind": "indicator_empty"}}],
  "seed": 11,
  "mc_samples": 8192,
  "experiment": {experiment}
}}"#
    )
}

fn report(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn gap_run_reports_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "gap.json", &config(r#"{"name": "gap"}"#));
    let out = bdlab(&["run", &cfg], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&out);
    assert_eq!(r["experiment"], "gap");
    assert_eq!(r["pass"], true);
    let gap = r["results"]["gap"]["gap"].as_f64().unwrap();
    assert!((gap - 0.6).abs() < 1e-8, "{gap}");
}

#[test]
fn same_seed_gives_same_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "m.json", &config(r#"{"name": "moments", "f": [1, 2]}"#));
    let a = report(&bdlab(&["run", &cfg], &[]));
    let b = report(&bdlab(&["run", &cfg], &[]));
    assert_eq!(a["results"], b["results"]);
    let c = report(&bdlab(&["--seed", "12", "run", &cfg], &[]));
    assert_eq!(c["seed"], 12);
    assert_ne!(a["results"]["mc"], c["results"]["mc"]);
}

#[test]
fn output_dir_env_names_report_after_config() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "mecke-small.json", &config(r#"{"name": "mecke"}"#));
    let out = bdlab(&["run", &cfg], &[("BDLAB_OUTPUT_DIR", out_dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let r: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.path().join("mecke-small.json")).unwrap()).unwrap();
    assert_eq!(r["experiment"], "mecke");
    // The config itself is never overwritten by its report.
    let out = bdlab(&["run", &cfg], &[("BDLAB_OUTPUT_DIR", dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(std::fs::read_to_string(&cfg).unwrap().contains("\"mecke\""));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", &config(r#"{"name": "gap"}"#).replace("[0.5, 1.5]", "[0.5, -1.5]"));
    let out = bdlab(&["validate", &bad], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("space[1]"));
    let typo = write(dir.path(), "typo.json", &config(r#"{"name": "gap", "solvr": "dense"}"#));
    assert_eq!(bdlab(&["run", &typo], &[]).status.code(), Some(2));
    let ok = write(dir.path(), "ok.json", &config(r#"{"name": "gap"}"#));
    let out = bdlab(&["validate", &ok], &[]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

#[test]
fn failed_verification_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // A constant of zero is below the best constant for a Gamma mixture.
    let cfg = write(dir.path(), "p.json", &config(r#"{"name": "poincare", "constant": 0.0}"#));
    let out = bdlab(&["run", &cfg, "-o", &dir.path().join("p-report.json").display().to_string()], &[]);
    assert_eq!(out.status.code(), Some(1));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("p-report.json")).unwrap()).unwrap();
    assert_eq!(r["pass"], false);
}

#[test]
fn dump_pmf_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.json", &config(r#"{"name": "gap"}"#));
    let csv = dir.path().join("pmf.csv");
    let out = bdlab(&["dump-pmf", &cfg, "--csv", &csv.display().to_string()], &[]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(csv).unwrap();
    let mass: f64 = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((mass - 1.0).abs() < 1e-11, "{mass}");
}
