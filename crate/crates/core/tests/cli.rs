use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eqa-defer"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn")
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

/// Writes a small config and simulates a world with logs under `o/`.
fn simulated() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"output_dir": "o", "n_records": 2000, "train": {"epochs": 5, "learning_rate": 0.01}}"#,
    )
    .unwrap();
    ok_json(dir.path(), &["simulate", "--config", "cfg.json", "--seed", "3"]);
    dir
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        run(dir.path(), &["evaluate", "--mode", "sideways"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(dir.path(), &["evaluate", "--strict", "--permissive"]).status.code(),
        Some(2)
    );
}

#[test]
fn data_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), "{\"query_id\":\"a\"}\n").unwrap();
    let out = run(dir.path(), &["evaluate", "--log", "bad.jsonl", "--force-agent", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
    let out = run(dir.path(), &["train", "--log", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn forced_main_model_never_defers() {
    let dir = simulated();
    let v = ok_json(
        dir.path(),
        &[
            "evaluate",
            "--config",
            "cfg.json",
            "--log",
            "o/eval.jsonl",
            "--force-agent",
            "0",
        ],
    );
    assert_eq!(v["report"]["expert_allocation_percent"], 0.0);
    assert_eq!(v["seed"], 0);
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 16);
}

#[test]
fn train_evaluate_bound_allocate() {
    let dir = simulated();
    let d = dir.path();
    let train = ["train", "--config", "cfg.json", "--seed", "5", "--log", "o/train.jsonl"];
    ok_json(d, &[&train[..], &["--model-out", "a.eqdr"]].concat());
    ok_json(d, &[&train[..], &["--model-out", "b.eqdr", "--serial"]].concat());
    assert_eq!(
        std::fs::read(d.join("a.eqdr")).unwrap(),
        std::fs::read(d.join("b.eqdr")).unwrap()
    );
    let trace = std::fs::read_to_string(d.join("o/trace.csv")).unwrap();
    assert!(trace.starts_with("# config_hash="));
    assert!(trace.contains("\n# seed=5\nstep,epoch,lr,mean_loss\n"));

    let eval = [
        "evaluate",
        "--config",
        "cfg.json",
        "--log",
        "o/eval.jsonl",
        "--model",
        "a.eqdr",
    ];
    let par = ok_json(d, &eval);
    let ser = ok_json(d, &[&eval[..], &["--serial"]].concat());
    assert_eq!(par, ser);
    assert!(par["report"]["em_percent"].as_f64().unwrap() > 60.0);

    let v = ok_json(
        d,
        &[
            "bound",
            "--config",
            "cfg.json",
            "--world",
            "o/world.json",
            "--model",
            "a.eqdr",
        ],
    );
    assert_eq!(v["bound"]["holds"], true);

    let v = ok_json(
        d,
        &[
            "allocate",
            "--model",
            "a.eqdr",
            "--features=-2,0.1",
            "--predictions",
            "3:7,2:7,-1:-1",
            "--mode",
            "per-head",
        ],
    );
    assert_eq!(v["start_agent"], 1);
    assert_eq!(v["span"], serde_json::json!([2, 7]));

    let out = run(
        d,
        &[
            "allocate",
            "--model",
            "a.eqdr",
            "--features",
            "1",
            "--predictions",
            "3:7,2:7,1:1",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_allocation_falls_with_cost() {
    let dir = simulated();
    let args = [
        "sweep",
        "--config",
        "cfg.json",
        "--log",
        "o/train.jsonl",
        "--eval-log",
        "o/eval.jsonl",
        "--grid",
        "0,0.5",
    ];
    let out = run(dir.path(), &args);
    assert_eq!(out.status.code(), Some(1), "strict mode rejects alpha + beta > 1");

    let v = ok_json(dir.path(), &[&args[..], &["--permissive"]].concat());
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1]["expert_alloc"].as_f64().unwrap() < rows[0]["expert_alloc"].as_f64().unwrap());
    let first = std::fs::read_to_string(dir.path().join("o/curve.csv")).unwrap();
    assert_eq!(first.lines().filter(|l| !l.starts_with('#')).count(), 3);

    ok_json(dir.path(), &[&args[..], &["--permissive"]].concat());
    assert_eq!(std::fs::read_to_string(dir.path().join("o/curve.csv")).unwrap(), first);
}

#[test]
fn oracle_reports_risk_and_agreement() {
    let dir = simulated();
    let v = ok_json(
        dir.path(),
        &[
            "oracle",
            "--config",
            "cfg.json",
            "--world",
            "o/world.json",
            "--agreement",
        ],
    );
    let joint = v["bayes_risk"]["joint"].as_f64().unwrap();
    let per_head = v["bayes_risk"]["per_head"].as_f64().unwrap();
    assert!(joint >= per_head);
    assert_eq!(v["agreement"]["checked"], v["agreement"]["agreed"]);
}
