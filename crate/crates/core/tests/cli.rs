use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn irglab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irglab")).args(args).output().expect("binary runs")
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

#[test]
fn help_exits_zero_and_unknown_subcommand_exits_two() {
    assert_eq!(irglab(&["--help"]).status.code(), Some(0));
    let out = irglab(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn stochastic_command_without_seed_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = irglab(&["mst", "--n", "50", "--replicas", "4", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn header_line_carries_schema_version() {
    let dir = tempfile::tempdir().unwrap();
    let out = irglab(&["er", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let header: serde_json::Value = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
    assert_eq!(header["schema"], "irglab-output");
    assert_eq!(header["version"], 1);
    assert_eq!(header["command"], "er");
}

#[test]
fn graph_sim_is_reproducible_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = config("two_type.toml");
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        let out = irglab(&[
            "graph-sim",
            "--config",
            &cfg,
            "--seed",
            "99",
            "--replicas",
            "4",
            "--n",
            "300",
            "--threads",
            threads,
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["snapshots.csv", "macroscopic.csv", "trajectory.csv", "graph_sim_summary.json"] {
        let x = fs::read(a.path().join(file)).unwrap();
        let y = fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file} differs");
    }
}

#[test]
fn mst_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = irglab(&["mst", "--n", "100", "--replicas", "6", "--seed", "5", "--out", dir.path().to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
    }
    assert_eq!(
        fs::read(a.path().join("mst_replicas.csv")).unwrap(),
        fs::read(b.path().join("mst_replicas.csv")).unwrap()
    );
}

#[test]
fn moments_refuse_the_critical_window() {
    let dir = tempfile::tempdir().unwrap();
    let out = irglab(&["moments", "--config", &config("two_type.toml"), "--times", "0.65", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_configs_load() {
    for name in ["er.toml", "two_type.toml"] {
        let dir = tempfile::tempdir().unwrap();
        let out = irglab(&["ode", "--config", &config(name), "--out", dir.path().to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{name}");
    }
}
