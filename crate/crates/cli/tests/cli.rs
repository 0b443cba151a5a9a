use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_nls-floer");

struct Run {
    dir: TempDir,
    out: Output,
}

impl Run {
    fn code(&self) -> i32 {
        self.out.status.code().expect("exited normally")
    }

    fn stdout(&self) -> String {
        String::from_utf8_lossy(&self.out.stdout).into_owned()
    }

    fn stderr(&self) -> String {
        String::from_utf8_lossy(&self.out.stderr).into_owned()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join("out").join(name)
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&self.read(name)).unwrap()
    }
}

fn run(sub: &str, config: &str, extra: &[&str]) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, config).unwrap();
    let out = Command::new(BIN)
        .arg(sub)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .args(extra)
        .output()
        .unwrap();
    Run { dir, out }
}

fn check_manifest(r: &Run, status: &str) -> Value {
    let m = r.json("manifest.json");
    assert_eq!(m["status"], status);
    assert_eq!(m["exit_code"], r.code());
    for a in m["artifacts"].as_array().unwrap() {
        let bytes = fs::read(r.path(a["path"].as_str().unwrap())).unwrap();
        assert_eq!(a["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
    m
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn empty_config_prints_defaults_only() {
    for text in ["", "{}"] {
        let r = run("floer", text, &[]);
        assert_eq!(r.code(), 0, "{}", r.stderr());
        assert!(r.stdout().contains("\"t_values\""));
        assert!(r.stdout().contains("validation: ok"));
        let m = check_manifest(&r, "ok");
        assert!(m["artifacts"].as_array().unwrap().is_empty());
        assert_eq!(listing(&r.path("")), vec!["manifest.json"]);
    }
}

#[test]
fn divisors_csv_has_m5_value() {
    let r = run("divisors", r#"{"pipeline": "divisors", "divisors": {"m_max": 100, "n": 0}}"#, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let csv = r.read("divisors.csv");
    let row = csv.lines().find(|l| l.starts_with("5,")).unwrap();
    let value: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
    assert!((value - 0.132741).abs() < 1e-6);
    assert_eq!(csv.lines().count(), 101);
    assert!(r.read("convergents.csv").lines().nth(2).unwrap().starts_with("1,6,1,6,"));
    check_manifest(&r, "ok");
}

#[test]
fn identical_config_gives_identical_bytes() {
    let cfg = r#"{"divisors": {"m_max": 300}, "galerkin": {"samples": 8}}"#;
    let a = run("divisors", cfg, &[]);
    let b = run("divisors", cfg, &[]);
    for name in ["divisors.csv", "records.csv", "convergents.csv", "divisors_report.json"] {
        assert_eq!(a.read(name), b.read(name));
    }
    let (ma, mb) = (a.json("manifest.json"), b.json("manifest.json"));
    assert_eq!(ma["artifacts"], mb["artifacts"]);
}

#[test]
fn hofer_constant_is_zero() {
    let cfg = r#"{"model": {"kernel": {"exponential": {"rate": 1, "k_max": 4}},
        "nonlinearity": {"kind": "constant", "c": 2}, "strength": 0.1, "bandwidth": 4},
        "hofer": {"t_nodes": 4, "starts": 2}}"#;
    let r = run("hofer", cfg, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    assert!(r.stdout().lines().any(|l| l == "hofer estimate: 0"));
    assert_eq!(r.json("hofer.json")["estimate"], 0.0);
    check_manifest(&r, "ok");
}

#[test]
fn simulate_hartree_matches_closed_form() {
    let cfg = r#"{"model": {"kernel": {"exponential": {"rate": 1, "k_max": 8}},
        "nonlinearity": {"kind": "hartree"}, "strength": 0.3, "bandwidth": 8},
        "simulate": {"steps": 40, "report_every": 10, "t1": 1.5}}"#;
    let r = run("simulate", cfg, &["--seed", "3"]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let rep = r.json("simulate_report.json");
    assert!(rep["closed_form_error"].as_f64().unwrap() < 1e-12);
    assert!(rep["l2_drift"].as_f64().unwrap() < 1e-12);
    assert_eq!(r.read("trajectory.csv").lines().count(), 6);
    assert_eq!(r.json("manifest.json")["seed"], 3);
}

#[test]
fn seed_controls_random_initial_state() {
    let cfg = r#"{"simulate": {"steps": 4, "report_every": 4}}"#;
    let a = run("simulate", cfg, &["--seed", "1"]);
    let b = run("simulate", cfg, &["--seed", "1"]);
    let c = run("simulate", cfg, &["--seed", "2"]);
    assert_eq!(a.read("final_state.csv"), b.read("final_state.csv"));
    assert_ne!(a.read("final_state.csv"), c.read("final_state.csv"));
}

#[test]
fn floer_trivial_bump_then_diagnose() {
    let cfg = r#"{"floer": {"cutoff": "bump", "t_values": [0], "n_s": 32, "n_t": 8, "s_half": 2}}"#;
    let r = run("floer", cfg, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let rep = r.json("floer_report.json");
    let first = &rep["runs"][0];
    assert_eq!(first["iterations"], 0);
    assert_eq!(first["converged"], true);
    assert_eq!(first["energy"], 0.0);
    assert!(r.read("floer_T0_history.csv").starts_with("iteration,"));
    check_manifest(&r, "ok");

    let state = r.path("floer_T0_state.json");
    let cfg = format!(r#"{{"diagnose": {{"states": [{:?}], "alphas": [0]}}}}"#, state.display().to_string());
    let d = run("diagnose", &cfg, &[]);
    assert_eq!(d.code(), 0, "{}", d.stderr());
    let names = listing(&d.path(""));
    for n in ["density_floer_T0_state.csv", "monitor_floer_T0_state.json", "profile_floer_T0_state_a0.csv"] {
        assert!(names.contains(&n.to_string()), "{names:?}");
    }
    assert!(d.json("monitor_floer_T0_state.json")["sup_ds"].as_f64().unwrap() < 1e-12);
}

#[test]
fn fixed_points_potential_kind() {
    let cfg = r#"{"pipeline": "fixed-points", "fixed_points": {"verify_tol": 1e-8,
        "continuation": {"eps_steps": 4, "newton": {"steps": 400}}}}"#;
    let r = run("fixed-points", cfg, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    for n in 0..4 {
        let f = r.json(&format!("fixed_point_n{n}.json"));
        assert_eq!(f["converged"], true);
        assert!(f["verify_residual"].as_f64().unwrap() < 1e-8);
    }
    let csv = r.read("distances.csv");
    assert_eq!(csv.lines().next().unwrap(), "point,n0,n1,n2,n3");
    assert!(r.json("fixed_points_report.json")["min_distance"].as_f64().unwrap() > 0.5);
    let m = check_manifest(&r, "ok");
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 10);
}

#[test]
fn non_convergence_keeps_artifacts() {
    let cfg = r#"{"fixed_points": {"modes": [0, 1], "verify_tol": 0,
        "continuation": {"eps_steps": 2, "newton": {"steps": 100}}}}"#;
    let r = run("fixed-points", cfg, &[]);
    assert_eq!(r.code(), 3);
    assert!(r.stderr().contains("mode 0"));
    assert!(r.path("fixed_point_n0.json").exists());
    assert!(r.path("distances.csv").exists());
    let m = check_manifest(&r, "non_convergence");
    assert!(m["config"]["fixed_points"]["modes"].is_array());
}

#[test]
fn unknown_field_reports_path() {
    let r = run("floer", r#"{"floer": {"solver": {"tolerance": 1e-6}}}"#, &[]);
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("floer.solver.tolerance"), "{}", r.stderr());
    let m = check_manifest(&r, "config_error");
    assert!(m["config"].is_null());
}

#[test]
fn invalid_values_report_every_path() {
    let r = run("floer", r#"{"floer": {"t_values": [0.5], "n_t": 4}, "galerkin": {"k_values": [9]}}"#, &[]);
    assert_eq!(r.code(), 2);
    let err = r.stderr();
    for p in ["floer.t_values[0]", "floer.n_t", "galerkin.k_values[0]"] {
        assert!(err.contains(p), "{err}");
    }
    check_manifest(&r, "config_error");
}

#[test]
fn pipeline_selector_must_match() {
    let r = run("hofer", r#"{"pipeline": "divisors"}"#, &[]);
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("pipeline"));
}

#[test]
fn missing_config_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["divisors", "--config"])
        .arg(dir.path().join("absent.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}
