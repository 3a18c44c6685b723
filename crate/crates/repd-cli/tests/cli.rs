//! End-to-end tests of the `repd` binary: subcommands, outputs, and the
//! documented exit-code table.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_repd"))
}

fn data(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(file)
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

#[test]
fn ingest_shipped_corpora_exits_zero_with_counts() {
    let out = repd()
        .args(["ingest"])
        .arg("--templates")
        .arg(data("templates.jsonl"))
        .arg("--questions")
        .arg(data("questions.jsonl"))
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout(&out);
    assert!(text.contains("templates: 10"), "{text}");
    assert!(text.contains("questions: 20"), "{text}");
}

#[test]
fn ingest_missing_file_exits_66() {
    let out = repd()
        .args(["ingest", "--templates", "/nonexistent/t.jsonl"])
        .arg("--questions")
        .arg(data("questions.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(66));
}

#[test]
fn ingest_invalid_record_exits_66() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        r#"{"id":"t1","text":"no placeholder","kind":"embedding"}"#,
    )
    .unwrap();
    let out = repd()
        .arg("ingest")
        .arg("--templates")
        .arg(&bad)
        .arg("--questions")
        .arg(data("questions.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(66));
}

#[test]
fn usage_error_exits_64() {
    let out = repd().args(["ingest", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(64));
    let out = repd().args(["not-a-command"]).output().unwrap();
    assert_eq!(out.status.code(), Some(64));
}

#[test]
fn help_exits_zero() {
    let out = repd().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn forge_output_replays_through_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("attacks.jsonl");
    let out = repd()
        .arg("forge")
        .arg("--templates")
        .arg(data("templates.jsonl"))
        .arg("--questions")
        .arg(data("questions.jsonl"))
        .args(["--mode", "base64"])
        .arg("--out")
        .arg(&out_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let set = repd_core::load_attack_corpus(&out_path, "replayed", Default::default()).unwrap();
    // 2 base64 wrappers x 10 harmful questions
    assert_eq!(set.prompts.len(), 20);
    assert!(set
        .prompts
        .iter()
        .all(|p| p.category == repd_core::AttackCategory::Encoding));
}

#[test]
fn gen_benign_against_mock_backend() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("benign.jsonl");
    let out = repd()
        .args(["gen-benign", "--n", "3"])
        .arg("--backend")
        .arg(data("backend_mock_benign.json"))
        .arg("--out")
        .arg(&out_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let store = repd_core::QuestionStore::load(&out_path).unwrap();
    assert_eq!(store.len(), 3);
    assert!(store
        .records()
        .iter()
        .all(|q| q.label == repd_core::QuestionLabel::Benign));
    // numbering prefixes stripped
    assert_eq!(
        store.records()[0].text,
        "What is the longest river in Europe?"
    );
}

#[test]
fn eval_demo_config_writes_report_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = repd()
        .arg("eval")
        .arg("--config")
        .arg(data("eval_mock.json"))
        .arg("--out")
        .arg(dir.path())
        .current_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../.."))
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["asr"], 0.0);
    assert_eq!(report["n_harmful"], 100);
    let log = std::fs::read_to_string(dir.path().join("outcomes.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 110);
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("config_fingerprint,asr,fpr"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn eval_backend_failure_exits_2_with_errored_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    // protected backend points at a closed port: every outcome errors
    let cfg = serde_json::json!({
        "pipeline": {"mode": "non_retrieval", "randomize": false, "seed": 1},
        "templates": data("templates.jsonl"),
        "questions": data("questions.jsonl"),
        "attacks": [],
        "protected": {"type": "http", "base_url": "http://127.0.0.1:9", "model": "none", "timeout_ms": 500},
        "parallelism": 1
    });
    let cfg_path = dir.path().join("eval.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    let out = repd()
        .arg("eval")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["n_errored"], 10, "all benign prompts errored");
}
