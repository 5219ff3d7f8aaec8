#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use support::{fixture, StubResponse, StubServer};

fn polevent(args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_polevent"))
        .args(args)
        .env_remove("POLEVENT_API_KEY")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut pipe = child.stdin.take().unwrap();
        if let Some(text) = stdin {
            pipe.write_all(text.as_bytes()).unwrap();
        }
    }
    child.wait_with_output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn built_index() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("idx");
    let out = polevent(&["build", "--corpus", s(&fixture("sample.jsonl")), "--out", s(&index)], None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    (dir, index)
}

#[test]
fn build_reports_counts() {
    let (_dir, index) = built_index();
    for name in ["index.pevi", "chunks.jsonl", "meta.json", "rejects.jsonl"] {
        assert!(index.join(name).exists(), "{name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let out = polevent(
        &["build", "--corpus", s(&fixture("sample.jsonl")), "--out", s(&dir.path().join("i")), "--json"],
        None,
    );
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["documents"], 15);
    assert_eq!(report["chunks"], 15);
    assert_eq!(report["dim"], 1024);

    let out = polevent(&["build", "--corpus", s(&fixture("sample.jsonl")), "--out", s(&dir.path().join("j"))], None);
    assert!(stdout(&out).contains("15 documents, 15 chunks"), "{}", stdout(&out));
}

#[test]
fn build_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = polevent(&["build", "--corpus", s(&dir.path().join("missing.jsonl")), "--out", s(dir.path())], None);
    assert_eq!(code(&out), 1);

    let config = dir.path().join("c.json");
    fs::write(&config, r#"{"corpus": {"filter": {"date_from": "2000-01-01", "date_to": "2001-01-01"}}}"#).unwrap();
    let out = polevent(
        &["build", "--config", s(&config), "--corpus", s(&fixture("sample.jsonl")), "--out", s(&dir.path().join("i"))],
        None,
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("no usable records"));

    fs::write(&config, r#"{"llm": {"api_key": "x"}}"#).unwrap();
    let out = polevent(&["build", "--config", s(&config), "--corpus", s(&fixture("sample.jsonl"))], None);
    assert_eq!(code(&out), 2);
}

#[test]
fn query_with_mock_returns_fda_event() {
    let (_dir, index) = built_index();
    let mock = fixture("sample_mock.json");
    let out = polevent(
        &["query", "--index", s(&index), "--mock", s(&mock), "--q", "What did the FDA approve in April 2022?"],
        None,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let events: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(events.as_array().unwrap().len(), 1);
    assert_eq!(events[0]["actor"], "FDA");
    assert!(events[0]["sources"][0].as_str().unwrap().ends_with("#0"));

    // Question on stdin, compact output, verbose diagnostics on stderr.
    let out = polevent(
        &["query", "--index", s(&index), "--mock", s(&mock), "--json", "--verbose"],
        Some("What did the FDA approve in April 2022?\n"),
    );
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).lines().count(), 1);
    assert!(stderr(&out).contains("raw model output"));
}

#[test]
fn query_without_matches_prints_empty_array() {
    let (_dir, index) = built_index();
    let out = polevent(
        &["query", "--index", s(&index), "--mock", s(&fixture("sample_mock.json")), "--q", "weather tomorrow"],
        None,
    );
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).trim(), "[]");
}

#[test]
fn query_usage_and_transport_errors() {
    let (dir, index) = built_index();
    assert_eq!(code(&polevent(&["query", "--index", s(&index), "--q", ""], None)), 64);
    assert_eq!(code(&polevent(&["query", "--index", s(&index)], Some("  \n"))), 64);

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let config = dir.path().join("c.json");
    fs::write(
        &config,
        format!(r#"{{"llm": {{"endpoint": "http://127.0.0.1:{port}", "max_retries": 1, "initial_backoff_ms": 1}}}}"#),
    )
    .unwrap();
    let out = polevent(&["query", "--config", s(&config), "--index", s(&index), "--q", "What did the FDA approve?"], None);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    let out = polevent(&["query", "--index", s(&dir.path().join("nowhere")), "--q", "x"], None);
    assert_eq!(code(&out), 1);
}

#[test]
fn api_key_never_reaches_output() {
    let (dir, index) = built_index();
    let key = "sk-cli-secret-77";
    let server = StubServer::start(vec![StubResponse::json(401, format!("{{\"error\": \"bad key {key}\"}}"))]);
    let config = dir.path().join("c.json");
    fs::write(&config, format!(r#"{{"llm": {{"endpoint": "{}"}}}}"#, server.url)).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_polevent"))
        .args(["query", "--config", s(&config), "--index", s(&index), "--q", "What did the FDA approve?", "--verbose"])
        .env("POLEVENT_API_KEY", key)
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
    assert!(!stderr(&out).contains(key));
    assert!(!stdout(&out).contains(key));
    assert_eq!(
        server.requests()[0].header("authorization"),
        Some(format!("Bearer {key}").as_str())
    );
    let shown = Command::new(env!("CARGO_BIN_EXE_polevent"))
        .args(["config", "--config", s(&config)])
        .env("POLEVENT_API_KEY", key)
        .output()
        .unwrap();
    let text = String::from_utf8(shown.stdout).unwrap();
    assert!(!text.contains(key));
    assert!(text.contains("\"api_key_set\": true"));
}

#[test]
fn repl_answers_and_lists_sources() {
    let (_dir, index) = built_index();
    let mock = fixture("sample_mock.json");
    let out = polevent(&["repl", "--index", s(&index), "--mock", s(&mock)], Some(":quit\n"));
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).is_empty());

    let session = "What did the FDA approve in April 2022?\n\
                   :sources\n\
                   Why did the GOP shift its stance on the deficit?\n\
                   :bogus\n\
                   :quit\n";
    let out = polevent(&["repl", "--index", s(&index), "--mock", s(&mock), "--json"], Some(session));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{lines:?}");
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(first[0]["actor"], "FDA");
    assert!(lines[1].contains("FDA"), "{}", lines[1]);
    let second: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
    assert_eq!(second[0]["actor"], "GOP");
    assert!(stderr(&out).contains("unknown command"));
}

#[test]
fn repl_survives_per_question_errors() {
    let (_dir, index) = built_index();
    // Same index, different embedder: every question fails but the loop goes on.
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(&config, r#"{"embedder": {"dim": 64}}"#).unwrap();
    let out = polevent(
        &["repl", "--config", s(&config), "--index", s(&index), "--mock", s(&fixture("sample_mock.json"))],
        Some("first?\nsecond?\n"),
    );
    assert_eq!(code(&out), 0);
    assert_eq!(stderr(&out).matches("error:").count(), 2);
}

#[test]
fn eval_with_perfect_mock_scores_one() {
    let (dir, index) = built_index();
    let report_path = dir.path().join("report.json");
    let out = polevent(
        &[
            "eval", "--index", s(&index), "--mock", s(&fixture("sample_mock.json")),
            "--gold", s(&fixture("sample_gold.json")), "--report", s(&report_path),
        ],
        None,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).starts_with("accuracy: 1.000"), "{}", stdout(&out));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["accuracy"], 1.0);
    assert_eq!(report["items"], 15);

    // Default report location and JSON mode.
    let out = polevent(
        &[
            "eval", "--index", s(&index), "--mock", s(&fixture("sample_mock.json")),
            "--gold", s(&fixture("sample_gold.json")), "--json",
        ],
        None,
    );
    let printed: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let stored: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(index.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(printed, stored);
}

#[test]
fn eval_rejects_bad_gold_and_misaligned_answers() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("gold.json");
    fs::write(&bad, r#"{"items": [{"question": "q", "gold_events": [{"actor": "A"}]}]}"#).unwrap();
    let out = polevent(&["eval", "--gold", s(&bad), "--answers", s(&bad)], None);
    assert_eq!(code(&out), 2);

    let answers = dir.path().join("answers.json");
    fs::write(&answers, r#"[{"question": "something else", "events": []}]"#).unwrap();
    let out = polevent(
        &["eval", "--gold", s(&fixture("sample_gold.json")), "--answers", s(&answers), "--report", s(&dir.path().join("r.json"))],
        None,
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no prediction aligned"));
}
