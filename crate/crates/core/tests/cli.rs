use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcdde-lab"))
        .args(args)
        .current_dir(dir)
        .env_remove("PCDDE_LAB_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn gradcheck_writes_results_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["gradcheck", "--cases", "3", "--seed", "5", "--out", "gc"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).lines().all(|l| l.starts_with("PASS")));
    assert!(dir.path().join("gc/gradcheck.csv").exists());
    assert!(dir.path().join("gc/manifest.json").exists());
}

#[test]
fn sabotaged_adjoint_is_a_tolerance_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["gradcheck", "--cases", "6", "--sabotage", "--out", "gc"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn config_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("bad.json"), "{ not json").unwrap();
    fs::write(p.join("unknown.json"), r#"{"a_min": 1.0, "colour": "red"}"#).unwrap();
    fs::write(p.join("invalid.json"), r#"{"tol": -1.0}"#).unwrap();
    for args in [
        vec!["map", "--config", "missing.json"],
        vec!["map", "--config", "bad.json"],
        vec!["map", "--config", "unknown.json"],
        vec!["map", "--config", "invalid.json"],
        vec!["map", "--cases", "3"],
        vec!["gradcheck", "--iterations", "3"],
    ] {
        let o = lab(&args, p);
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn thread_cap_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    for (v, want) in [("0", 2), ("many", 2), ("1", 0)] {
        let o = Command::new(env!("CARGO_BIN_EXE_pcdde-lab"))
            .args(["map", "--out", "m"])
            .current_dir(dir.path())
            .env("PCDDE_LAB_THREADS", v)
            .output()
            .unwrap();
        assert_eq!(code(&o), want, "PCDDE_LAB_THREADS={v}");
    }
}

#[test]
fn manifest_reruns_reproduce_the_scan() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("map.json"), r#"{"a_steps": 12, "burn_in": 300}"#).unwrap();
    assert_eq!(code(&lab(&["map", "--config", "map.json", "--out", "first"], p)), 0);
    assert_eq!(code(&lab(&["map", "--config", "first/manifest.json", "--out", "second"], p)), 0);
    let a = fs::read(p.join("first/bifurcation.csv")).unwrap();
    let b = fs::read(p.join("second/bifurcation.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let o = lab(&["gradcheck", "--config", "first/manifest.json"], p);
    assert_eq!(code(&o), 2);
}

#[test]
fn undertrained_fig1_fails_its_tolerances() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["fig1", "--iterations", "50", "--n-seeds", "1", "--out", "f"], dir.path());
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("f/manifest.json").exists());
}
