use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.json"))
}

fn obliq(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_obliq"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

/// The single run directory below `out`.
fn run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = std::fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("summary.json")).unwrap()).unwrap()
}

fn stage<'a>(s: &'a Value, name: &str) -> &'a Value {
    s["stages"].as_array().unwrap().iter().find(|st| st["stage"] == name).unwrap()
}

#[test]
fn deterministic_config_reports_the_root() {
    let out = tempfile::tempdir().unwrap();
    let o = obliq(&["run", "--config", config("deterministic_two_mode").to_str().unwrap(), "--out", out.path().to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(out.path());
    let s = summary(&dir);
    assert_eq!(s["verdict"], "PASS");
    let root = &stage(&s, "solve")["data"]["summary"]["root"];
    assert!((root[0].as_f64().unwrap() - 0.5).abs() < 1e-6);
    assert!(root[1].as_f64().unwrap().abs() < 1e-6);
    let name = dir.file_name().unwrap().to_str().unwrap();
    assert!(name.starts_with(&s["config_hash"].as_str().unwrap()[..12]));
    for f in ["levels.csv", "penalty_schedule.csv", "strategy_events.csv", "config.json"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let events = std::fs::read_to_string(dir.join("strategy_events.csv")).unwrap();
    assert_eq!(events.lines().count(), 2, "one switch from the first mode at the root:\n{events}");
}

#[test]
fn single_mode_config_matches_the_exponential() {
    let out = tempfile::tempdir().unwrap();
    let o = obliq(&["solve", "--config", config("m1_plain").to_str().unwrap(), "--out", out.path().to_str().unwrap()], &[]);
    assert!(o.status.success());
    let s = summary(&run_dir(out.path()));
    let checks = stage(&s, "solve")["checks"].as_array().unwrap();
    let cf = checks.iter().find(|c| c["name"] == "closed_form").unwrap();
    assert_eq!(cf["passed"], true);
    assert!(cf["measured"].as_f64().unwrap() < 2e-3);
}

#[test]
fn missing_costs_exit_nonzero_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"problem": {"generator": {"kind": "constant", "c": [1, 0]},
            "terminal": {"kind": "constant", "values": [0, 0]}, "horizon": 1}}"#,
    )
    .unwrap();
    let o = obliq(&["solve", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["kind"], "config");
    assert_eq!(err["field"], "problem");
    assert!(err["message"].as_str().unwrap().contains("costs"));
}

#[test]
fn invalid_costs_are_rejected_before_solving() {
    let o = obliq(
        &["solve", "--config", config("deterministic_two_mode").to_str().unwrap(), "--out", "target/never"],
        &[("OBLIQ_CFG__problem__costs", "[[0, 1, 3], [1, 0, 1], [3, 1, 0]]")],
    );
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["field"], "problem.costs");
    assert!(!Path::new("target/never").exists());
}

#[test]
fn env_override_reaches_the_solver() {
    let out = tempfile::tempdir().unwrap();
    let o = obliq(
        &["solve", "--config", config("deterministic_two_mode").to_str().unwrap(), "--out", out.path().to_str().unwrap()],
        &[("OBLIQ_CFG__solver__lattice__steps", "8")],
    );
    assert!(o.status.success());
    let s = summary(&run_dir(out.path()));
    assert_eq!(stage(&s, "solve")["data"]["steps"], 8);
}

#[test]
fn failed_check_exits_with_one() {
    let out = tempfile::tempdir().unwrap();
    let o = obliq(
        &["solve", "--config", config("deterministic_two_mode").to_str().unwrap(), "--out", out.path().to_str().unwrap()],
        &[("OBLIQ_CFG__checks__expected_root", "[0.6, 0]")],
    );
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(summary(&run_dir(out.path()))["verdict"], "FAIL");
}

#[test]
fn reruns_are_bitwise_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for out in [&a, &b] {
        let o = obliq(&["run", "--config", config("quadratic_diffusion").to_str().unwrap(), "--out", out.path().to_str().unwrap()], &[]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    }
    let (da, db) = (run_dir(a.path()), run_dir(b.path()));
    for f in ["summary.json", "costs.csv", "ensemble.json", "levels.csv", "pde_grid.csv", "feynman_kac.csv", "refinement.csv"] {
        assert_eq!(std::fs::read(da.join(f)).unwrap(), std::fs::read(db.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn seed_flag_changes_the_ensemble() {
    let out = tempfile::tempdir().unwrap();
    let o = obliq(
        &["simulate", "--config", config("quadratic_diffusion").to_str().unwrap(), "--out", out.path().to_str().unwrap(), "--seed", "99"],
        &[("OBLIQ_CFG__solver__monte_carlo__paths", "2000")],
    );
    assert!(o.status.success());
    let e: Value = serde_json::from_slice(&std::fs::read(run_dir(out.path()).join("ensemble.json")).unwrap()).unwrap();
    assert_eq!(e["seed"], 99);
    assert_eq!(e["paths"], 2000);
}

#[test]
fn accept_verb_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let o = obliq(&["accept", "--tier", "quick", "--out", path.to_str().unwrap()], &[]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 15, "{stdout}");
    let r: Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    assert_eq!(r["passed"], true);
}
