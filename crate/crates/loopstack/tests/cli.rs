use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_loopstack");

const MODEL: &str = r#"{"synthetic": {"config": {"n_layers": 6, "d_model": 16, "n_heads": 2,
    "head_dim": 8, "ffn_hidden": 32, "vocab_size": 32}}}"#;

fn run(dir: &Path, task: &str, config: &str, extra: &[&str]) -> Output {
    let path = dir.join(format!("{task}.json"));
    fs::write(&path, config).unwrap();
    Command::new(BIN)
        .arg(task)
        .arg("--config")
        .arg(&path)
        .args(["--out", dir.join("out").to_str().unwrap()])
        .args(extra)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn empty_sweep_exits_cleanly_with_a_header_only_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(r#"{{"model": {MODEL}, "sweep": {{"strategies": []}}}}"#);
    let o = run(dir.path(), "sweep", &cfg, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    assert_eq!(
        csv,
        "strategy,K,mode,mean_dev,p90_dev,fwd_passes,wall_ms,window_a,window_b,diverged\n"
    );
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = format!(r#"{{"model": {MODEL}, "sweep": {{"strategies": []}}, "bogus": 1}}"#);
    assert_eq!(code(&run(dir.path(), "sweep", &bad, &[])), 1);
    let odd =
        format!(r#"{{"model": {MODEL}, "loop": {{"strategy": {{"kind": "aitken", "k": 3}}}}}}"#);
    assert_eq!(code(&run(dir.path(), "gen", &odd, &[])), 1);
    let mismatch = format!(r#"{{"task": "gen", "model": {MODEL}}}"#);
    assert_eq!(code(&run(dir.path(), "sweep", &mismatch, &[])), 1);
    let o = Command::new(BIN).args(["sweep"]).output().unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn audit_violation_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        r#"{{"model": {MODEL}, "loop": {{"strategy": {{"kind": "euler", "k": 2}}}},
            "audit": {{"max_new": 3, "disable_crop": true}}}}"#
    );
    let o = run(dir.path(), "cache-audit", &cfg, &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("evaluation 1"));
}

#[test]
fn audit_passes_and_logs_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        r#"{{"model": {MODEL}, "loop": {{"strategy": {{"kind": "euler", "k": 2}}}},
            "audit": {{"max_new": 3}}}}"#
    );
    let o = run(dir.path(), "cache-audit", &cfg, &[]);
    assert_eq!(code(&o), 0);
    let log = fs::read_to_string(dir.path().join("out/audit.log")).unwrap();
    for i in 0..3 {
        assert!(log.contains(&format!("step {i}: OK, delta=1/layer/step")));
    }
}

#[test]
fn toy_training_divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"toy": {"lab": {"learning_rate": 1e200, "steps": 50, "n_train": 64,
        "n_test": 16, "resolution": 4}}}"#;
    let o = run(dir.path(), "toy", cfg, &["--seed", "3"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn make_model_is_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(r#"{{"model": {MODEL}}}"#);
    let a = run(dir.path(), "make-model", &cfg, &["--seed", "4"]);
    assert_eq!(code(&a), 0);
    let first = fs::read(dir.path().join("out/model.tflt")).unwrap();
    run(dir.path(), "make-model", &cfg, &["--seed", "4"]);
    assert_eq!(first, fs::read(dir.path().join("out/model.tflt")).unwrap());
    run(dir.path(), "make-model", &cfg, &["--seed", "5"]);
    assert_ne!(first, fs::read(dir.path().join("out/model.tflt")).unwrap());

    let from_file = r#"{"model": {"path": "out/model.tflt"},
        "loop": {"strategy": {"kind": "euler", "k": 2}}, "gen": {"max_new": 2}}"#;
    let o = run(dir.path(), "gen", from_file, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let path = r#"{"model": {"path": "out/model.tflt"}}"#;
    assert_eq!(code(&run(dir.path(), "make-model", path, &[])), 1);
}
