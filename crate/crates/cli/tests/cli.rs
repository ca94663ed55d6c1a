use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden")
}

fn dynrag(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_dynrag")).args(args).env_remove("DYNRAG_BACKEND").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn run_reproduces_golden_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = golden().join("config.toml");
    let out = dir.path().to_str().unwrap();
    dynrag(&["run", "--config", config.to_str().unwrap(), "--out", out]);
    for file in ["report.jsonl", "summary.txt", "audit.jsonl"] {
        let want = fs::read_to_string(golden().join("expected/dragin").join(file)).unwrap();
        let got = fs::read_to_string(dir.path().join(file)).unwrap();
        assert_eq!(got, want, "{file}");
    }
}

#[test]
fn strategy_override_matches_no_retrieval_golden() {
    let dir = tempfile::tempdir().unwrap();
    let config = golden().join("config.toml");
    let out = dir.path().to_str().unwrap();
    dynrag(&["run", "--config", config.to_str().unwrap(), "--strategy", "wo-rag", "--out", out]);
    let records = |text: String| text.lines().filter(|l| l.starts_with("{\"id\"")).map(str::to_string).collect::<Vec<_>>();
    let want = records(fs::read_to_string(golden().join("expected/wo_rag/report.jsonl")).unwrap());
    let got = records(fs::read_to_string(dir.path().join("report.jsonl")).unwrap());
    assert_eq!(want.len(), 5);
    assert_eq!(got, want);
}

#[test]
fn sweep_writes_one_row_per_theta() {
    let dir = tempfile::tempdir().unwrap();
    let config = golden().join("config.toml");
    let out = dir.path().to_str().unwrap();
    let output = dynrag(&["sweep", "--config", config.to_str().unwrap(), "--thetas", "1.0:1.4:0.2", "--out", out]);
    assert!(!output.stdout.is_empty());
    let rows = fs::read_to_string(dir.path().join("sweep.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 3);
}

#[test]
fn index_round_trip_serves_search() {
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("corpus.idx");
    let corpus = golden().join("corpus.jsonl");
    dynrag(&["index", "build", "--corpus", corpus.to_str().unwrap(), "--out", index.to_str().unwrap()]);
    let out = dynrag(&["index", "search", "--index", index.to_str().unwrap(), "--query", "Miguel Morayta died", "--k", "2"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("Morayta"), "{stdout}");
}
