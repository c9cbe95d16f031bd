use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_manifold-mpc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn design_is_written_and_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = run(&["design", "--out", path(&a)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("terminal level c"));
    assert!(run(&["design", "--out", path(&b)]).status.success());
    let first = std::fs::read(a.join("design.json")).unwrap();
    assert_eq!(first, std::fs::read(b.join("design.json")).unwrap());
    let doc: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert!(doc["c"].as_f64().unwrap() > 0.0);
    assert_eq!(doc["P"].as_array().unwrap().len(), 36);
    assert_eq!(doc["config"]["weights"]["lambda"], 0.1);
}

#[test]
fn invalid_config_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{"weights": {"lambda": 1.5}}"#);
    let out = run(&["design", "--config", &cfg, "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("weights.lambda"), "{}", stderr(&out));

    let cfg = write_config(dir.path(), "typo.json", r#"{"mpc": {"horizon": 5}}"#);
    let out = run(&["design", "--config", &cfg, "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_design_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = run(&["simulate", "--design", path(&missing), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing.json"));
}

#[test]
fn unknown_suite_and_bad_flags_are_usage_errors() {
    assert_eq!(run(&["verify", "bogus"]).status.code(), Some(2));
    assert_eq!(run(&["simulate"]).status.code(), Some(2));
    assert_eq!(run(&["design", "--seed", "x"]).status.code(), Some(2));
}

#[test]
fn simulate_at_identity_and_from_the_cut() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&["design", "--out", path(dir.path())]).status.success());
    let design = dir.path().join("design.json");

    let cfg = write_config(
        dir.path(),
        "identity.json",
        r#"{"experiment": {"initial_axis_angle_radians": [0, 0, 0], "stop_when_converged": true}}"#,
    );
    let id_out = dir.path().join("identity");
    let out = run(&["simulate", "--config", &cfg, "--design", path(&design), "--out", path(&id_out)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("steps=0 converged=true converged_at=0"), "{}", stdout(&out));

    // Without --config the snapshot embedded in the design is used.
    let pi_out = dir.path().join("pi");
    let out = run(&["simulate", "--design", path(&design), "--out", path(&pi_out)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("steps=200 converged=true"), "{}", stdout(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(pi_out.join("simulate.json")).unwrap()).unwrap();
    assert!(summary["final_distance"].as_f64().unwrap() < 1e-2);
    assert_eq!(summary["config"]["experiment"]["n_steps"], 200);
    let trajectory = std::fs::read_to_string(pi_out.join("simulate_trajectory.csv")).unwrap();
    assert_eq!(trajectory.lines().count(), 1 + 201);
    assert!(pi_out.join("simulate_diagnostics.csv").exists());
}

#[test]
fn infeasible_run_exits_with_step() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&["design", "--out", path(dir.path())]).status.success());
    let cfg = write_config(dir.path(), "short.json", r#"{"mpc": {"horizon_steps": 1}, "experiment": {"n_steps": 5}}"#);
    let design = dir.path().join("design.json");
    let out = run(&["simulate", "--config", &cfg, "--design", path(&design), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("infeasible at step 0"), "{}", stderr(&out));
}

#[test]
fn verify_conservation_writes_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["verify", "conservation", "--out", path(dir.path()), "--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).trim_end().ends_with("PASS"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], true);
    assert_eq!(summary["reports"][0]["seed"], 3);
    assert!(dir.path().join("conservation.json").exists());
}

#[test]
fn verify_discontinuity_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["verify", "discontinuity", "--out", path(dir.path())]);
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
    assert!(dir.path().join("discontinuity.json").exists());
}

#[test]
fn failed_verification_exits_one() {
    // With zero steps forward Euler has no drift, so the contrast verdict fails.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "zero.json", r#"{"experiment": {"conservation_steps": 0}}"#);
    let out = run(&["verify", "conservation", "--config", &cfg, "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1), "{}{}", stdout(&out), stderr(&out));
    assert!(stdout(&out).trim_end().ends_with("FAIL"));
}
