use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn run(out: &Path, args: &[&str]) -> Output {
    let config = fixtures().join("config.toml");
    Command::new(env!("CARGO_BIN_EXE_reservoirchat"))
        .args(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn build(out: &Path) {
    let corpus = fixtures().join("corpus");
    let qa = fixtures().join("qa.jsonl");
    let o = run(out, &["ingest", corpus.to_str().unwrap(), "--qa", qa.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ingested 3 documents"));
    let o = run(out, &["build-graph"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn invalid_overlap_is_a_usage_error() {
    let out = tempfile::tempdir().unwrap();
    let corpus = fixtures().join("corpus");
    let o = run(out.path(), &["ingest", corpus.to_str().unwrap(), "--size", "100", "--overlap", "100"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("InvalidChunkParams"), "{}", stderr(&o));
    assert!(!out.path().join("chunks.jsonl").exists(), "nothing written on invalid parameters");
}

#[test]
fn query_before_build_and_unknown_flags() {
    let out = tempfile::tempdir().unwrap();
    let o = run(out.path(), &["query", "What is a reservoir?"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(out.path(), &["build-graph"]);
    assert_eq!(o.status.code(), Some(2), "build-graph without chunks: {}", stderr(&o));
    assert_eq!(run(out.path(), &["query", "x", "--mode", "psychic"]).status.code(), Some(1));
    assert_eq!(run(out.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn query_modes_and_exit_codes() {
    let out = tempfile::tempdir().unwrap();
    build(out.path());

    let o = run(out.path(), &["query", "Code me the initialization of a reservoir", "--mode", "rag"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("Reservoir(units=100"));
    assert!(stderr(&o).contains("trace\tChunk\tcodes.md#0..329"));

    let o = run(out.path(), &["query", "Who develops ReservoirPy?", "--mode", "faq"]);
    assert_eq!(stdout(&o).trim(), "ReservoirPy is developed at Inria in Bordeaux.");

    let o = run(out.path(), &["query", "completely unrelated words", "--mode", "faq"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("NoMatch"));

    let o = run(out.path(), &["query", "   "]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn provider_failures_exit_with_three() {
    let out = tempfile::tempdir().unwrap();
    build(out.path());
    let script = out.path().join("failing.json");
    std::fs::write(&script, r#"{"default_reply": "<|ERROR|> 503 overloaded", "embed_dim": 64, "seed": 7, "fingerprints": {}, "rules": []}"#)
        .unwrap();
    let config = fixtures().join("config.toml");
    let o = Command::new(env!("CARGO_BIN_EXE_reservoirchat"))
        .args(["--config", config.to_str().unwrap(), "--out", out.path().to_str().unwrap(), "query", "What is a reservoir?"])
        .env("RCHAT__PROVIDER__MOCK_SCRIPT", &script)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn bench_report_writes_tables_and_rejects_mismatched_sets() {
    let out = tempfile::tempdir().unwrap();
    let dataset = fixtures().join("benchmark.json");
    let dataset = dataset.to_str().unwrap();
    for name in ["alpha", "beta"] {
        let o = run(out.path(), &["bench", "run", "--dataset", dataset, "--target", "provider", "--reps", "2", "--name", name]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("excluded (no answer key): K2"));
    }
    let alpha = out.path().join("bench/alpha.results.json");
    let beta = out.path().join("bench/beta.results.json");
    let o = run(
        out.path(),
        &["bench", "report", "--results", alpha.to_str().unwrap(), beta.to_str().unwrap(), "--encoding", "letter_ordinal"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("== Percentage (code) =="));
    for f in ["pearson.csv", "difference_knowledge.csv", "percentage_code.csv", "scale_relative_code.csv", "totals.csv"] {
        assert!(out.path().join("report").join(f).exists(), "{f} missing");
    }

    // Drop one question from beta's results.
    let mut raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&beta).unwrap()).unwrap();
    raw["questions"].as_array_mut().unwrap().retain(|q| q["qid"] != "C14");
    raw["records"].as_array_mut().unwrap().retain(|r| r["qid"] != "C14");
    std::fs::write(&beta, raw.to_string()).unwrap();
    let o = run(out.path(), &["bench", "report", "--results", alpha.to_str().unwrap(), beta.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("C14"), "{}", stderr(&o));
}
