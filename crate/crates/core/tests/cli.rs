use std::path::Path;
use std::process::{Command, Output};

use datapc::sim;

fn datapc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_datapc")).current_dir(dir).args(args).output().expect("binary runs")
}

fn write_chain(dir: &Path) {
    let truth = sim::build_msd_chain(1, 4);
    let data = sim::generate_data(&truth, 400, 2.0, 5).unwrap();
    std::fs::write(dir.join("model.json"), serde_json::to_string(&truth.model).unwrap()).unwrap();
    data.write_csv(std::fs::File::create(dir.join("data.csv")).unwrap()).unwrap();
}

#[test]
fn missing_input_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = datapc(dir.path(), &["--json-errors", "identify", "--model", "absent.json", "--data", "absent.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "validation");
    assert_eq!(err["exit_code"], 1);
    assert!(err["message"].as_str().unwrap().contains("absent.json"));
}

#[test]
fn usage_and_configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(datapc(dir.path(), &["--mode", "qp", "run", "--design", "a", "--plant", "b"]).status.code(), Some(1));
    assert_eq!(datapc(dir.path(), &["--delta", "1.5", "identify", "--model", "a", "--data", "b"]).status.code(), Some(1));
    std::fs::write(dir.path().join("cfg.json"), r#"{"version": 99}"#).unwrap();
    assert_eq!(datapc(dir.path(), &["--config", "cfg.json", "identify", "--model", "a", "--data", "b"]).status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_datapc"))
        .current_dir(dir.path())
        .env("D2PC_THREADS", "zero")
        .args(["identify", "--model", "a", "--data", "b"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(datapc(dir.path(), &["--help"]).status.success());
}

#[test]
fn identify_is_deterministic_and_monotone() {
    let dir = tempfile::tempdir().unwrap();
    write_chain(dir.path());
    let run = |out: &str| {
        let o = datapc(dir.path(), &["--out", out, "identify", "--model", "model.json", "--data", "data.csv"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let theta = std::fs::read(dir.path().join(out).join("theta.json")).unwrap();
        let trace = std::fs::read_to_string(dir.path().join(out).join("gem_trace.csv")).unwrap();
        (theta, trace)
    };
    let (t1, tr1) = run("a");
    let (t2, tr2) = run("b");
    assert_eq!(t1, t2);
    assert_eq!(tr1, tr2);
    let est: serde_json::Value = serde_json::from_slice(&t1).unwrap();
    assert_eq!(est["version"], 1);
    let ll: Vec<f64> = tr1.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(ll.len() > 1);
    for w in ll.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0), "log-likelihood decreased: {} -> {}", w[0], w[1]);
    }

    let o = datapc(dir.path(), &["--out", "a", "--delta", "0.9", "uq", "--model", "model.json", "--data", "data.csv", "--theta", "a/theta.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ell: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("a/ellipsoid.json")).unwrap()).unwrap();
    assert_eq!(ell["version"], 1);
    assert_eq!(ell["delta"], 0.9);
}

#[test]
fn demo_artifacts_drive_eval_and_reject_a_foreign_start() {
    let dir = tempfile::tempdir().unwrap();
    let o = datapc(dir.path(), &["--out", "d", "demo-msd", "--masses", "1", "--runs", "4", "--steps", "20", "--samples", "1000"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("d/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["version"], 1);
    assert_eq!(summary["policies"].as_array().unwrap().len(), 4);

    let o = datapc(dir.path(), &["--out", "e", "eval", "--scenario", "d/scenario.json", "--design", "d/design.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("e/eval.json")).unwrap()).unwrap();
    assert_eq!(rep["aggregate"]["runs"], 4);

    let path = dir.path().join("d/scenario.json");
    let mut sc: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let x0 = sc["x0_mean"][0].as_f64().unwrap();
    sc["x0_mean"][0] = serde_json::json!(x0 + 0.1);
    std::fs::write(&path, serde_json::to_string(&sc).unwrap()).unwrap();
    let o = datapc(dir.path(), &["--json-errors", "--out", "e", "eval", "--scenario", "d/scenario.json", "--design", "d/design.json"]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(err["message"].as_str().unwrap().contains("initial mean"));
}
