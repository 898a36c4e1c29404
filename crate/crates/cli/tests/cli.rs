use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use soft_ocp_cli::{bundled_tasks, load_bundled};

fn soft_ocp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soft-ocp"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn every_bundled_config_validates() {
    let names = bundled_tasks();
    assert!(names.len() >= 14, "{names:?}");
    for name in &names {
        let cfg = load_bundled(name).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(&cfg.name, name);
        let out = soft_ocp(&["validate", name]);
        assert!(
            out.status.success(),
            "{name}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn list_tasks_prints_bundled_names() {
    let out = soft_ocp(&["list-tasks"]);
    assert!(out.status.success());
    let listed: Vec<String> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(listed, bundled_tasks());
}

#[test]
fn missing_dt_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(soft_ocp_cli::resolve_config("2dof_sea_regulation")).unwrap();
    let broken: String = text
        .lines()
        .filter(|l| !l.trim_start().starts_with("dt "))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.path().join("broken.toml");
    fs::write(&path, broken).unwrap();
    for sub in ["validate", "run"] {
        let out = soft_ocp(&[sub, path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{sub}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("dt"), "{sub}: {err}");
    }
}

#[test]
fn unknown_file_is_a_config_error() {
    let out = soft_ocp(&["validate", "/nonexistent/task.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn reruns_write_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = soft_ocp(&["run", "2dof_sea_regulation", "--out", d.to_str().unwrap()]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for f in [
        "trajectory.csv",
        "controls.csv",
        "gains.csv",
        "rms.csv",
        "report.json",
        "summary.txt",
    ] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    let traj = String::from_utf8(read(&a, "trajectory.csv")).unwrap();
    assert!(traj.starts_with("t,q0,q1,qdot0,qdot1,theta0,theta1,thetadot0,thetadot1,tau0,tau1\n"));
    assert_eq!(traj.lines().count(), 1 + 301);
    let report: serde_json::Value = serde_json::from_slice(&read(&a, "report.json")).unwrap();
    assert_eq!(report["converged"], serde_json::Value::Bool(true));
}

#[test]
fn seed_override_changes_only_perturbed_results() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (d, seed) in [(&a, "1"), (&b, "2")] {
        let out = soft_ocp(&[
            "run",
            "2dof_sea_regulation",
            "--out",
            d.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert!(out.status.success());
    }
    assert_eq!(read(&a, "trajectory.csv"), read(&b, "trajectory.csv"));
    assert_ne!(read(&a, "rms.csv"), read(&b, "rms.csv"));
}

#[test]
fn iteration_cap_reports_not_converged() {
    let dir = tempfile::tempdir().unwrap();
    let out = soft_ocp(&[
        "run",
        "2dof_vsa_regulation",
        "--out",
        dir.path().to_str().unwrap(),
        "--max-iter",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("trajectory.csv").exists());
}
