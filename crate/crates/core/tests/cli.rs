use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use voltstab::checkpoint::{Checkpoint, CheckpointBody};
use voltstab::grid::VoltageBand;
use voltstab::policy::{RawPolicyParams, StackedRelu, DEFAULT_EPS};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voltstab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Constrained checkpoint with every piece slope ≈ 1.15.
fn constrained_checkpoint(dir: &Path) -> PathBuf {
    let d = 6;
    let mut raw = RawPolicyParams::zeros(4, d);
    let a = 1.15f64.exp_m1().ln();
    for bus in &mut raw.buses {
        bus[..d].fill(a);
        bus[2 * d..3 * d].fill(a);
    }
    let path = dir.join("constrained.json");
    Checkpoint::from_raw(&raw, &VoltageBand::uniform(4, 0.95, 1.05), DEFAULT_EPS)
        .save(&path)
        .unwrap();
    path
}

/// Explicit checkpoint whose upper side pushes voltage further up.
fn inverted_checkpoint(dir: &Path) -> PathBuf {
    let unit = StackedRelu {
        wplus: vec![0.0, -1.0, 0.0],
        bplus: vec![0.0, -1.05, -1.06],
        wminus: vec![0.0, -1.0, 0.0],
        bminus: vec![0.0, 0.95, 0.94],
        lower: 0.95,
        upper: 1.05,
    };
    let path = dir.join("inverted.json");
    Checkpoint::new(CheckpointBody::Explicit {
        eps: DEFAULT_EPS,
        buses: vec![unit; 4],
    })
    .save(&path)
    .unwrap();
    path
}

#[test]
fn certify_passes_constrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = constrained_checkpoint(dir.path());
    let out = run(&["certify", "--checkpoint", p(&ck), "--rollouts", "30"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("PASS"), "{text}");
}

#[test]
fn certify_rejects_inverted_fixture_with_witness() {
    let dir = tempfile::tempdir().unwrap();
    let ck = inverted_checkpoint(dir.path());
    let report = dir.path().join("cert.json");
    let out = run(&["certify", "--checkpoint", p(&ck), "--format", "json", "--out", p(&report), "--rollouts", "10"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    let cert: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(cert["passed"], false);
    let witnesses = cert["jacobian_nonpositive"]["witnesses"].as_array().unwrap();
    assert!(!witnesses.is_empty());
    assert!(witnesses[0]["voltage"].as_array().is_some());
}

#[test]
fn usage_errors_exit_two_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<String>> = vec![
        vec!["evaluate".into(), "--policy".into(), "linear".into(), "--scenarios".into(), "0".into(), "--out-dir".into(), p(dir.path()).into()],
        vec!["certify".into(), "--bogus".into()],
        vec!["nonsense".into()],
        vec!["certify".into(), "--checkpoint".into(), p(&dir.path().join("missing.json")).into()],
        vec!["simulate".into(), "--dt".into(), "abc".into()],
    ];
    for args in cases {
        let args: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
        let err = stderr(&out);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error: usage: "), "{err}");
    }
}

#[test]
fn help_exits_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn generate_and_simulate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("net.json");
    let out = run(&["generate-network", "--buses", "7", "--seed", "3", "--out", p(&net)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let traj = dir.path().join("traj.csv");
    let out = run(&["simulate", "--network", p(&net), "--policy", "linear", "--horizon", "20", "--out", p(&traj)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(&traj).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,bus,v,q,u,cost"));
    // 21 voltage snapshots × 7 buses.
    assert_eq!(lines.count(), 21 * 7);
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn train_and_evaluate_are_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"episodes": 6, "batch_size": 32, "updates_per_episode": 5}"#).unwrap();
    let mut artifacts = Vec::new();
    for k in 0..2 {
        let ck = dir.path().join(format!("ck{k}.json"));
        let log = dir.path().join(format!("log{k}.csv"));
        let out = run(&[
            "train", "--config", p(&cfg), "--seed", "9", "--no-wall-clock", "--checkpoint", p(&ck), "--log", p(&log),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        let eval_dir = dir.path().join(format!("eval{k}"));
        let spec = format!("stable={}", p(&ck));
        let out = run(&[
            "evaluate", "--policy", &spec, "--policy", "linear", "--scenarios", "12", "--seed", "4", "--out-dir",
            p(&eval_dir),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        artifacts.push((std::fs::read(&ck).unwrap(), std::fs::read(&log).unwrap(), read_dir_bytes(&eval_dir)));
    }
    assert_eq!(artifacts[0], artifacts[1]);
    let names: Vec<&str> = artifacts[0].2.iter().map(|(n, _)| n.as_str()).collect();
    for want in ["report.csv", "scenarios.json", "terminal_histogram.csv", "voltage_traces.csv"] {
        assert!(names.contains(&want), "{names:?}");
    }
    let log = String::from_utf8(artifacts[0].1.clone()).unwrap();
    assert_eq!(log.lines().count(), 7);
}
