use std::path::PathBuf;
use std::process::Command;

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
        .to_str()
        .unwrap()
        .to_string()
}

fn rahore(args: &[&str], env: &[(&str, &str)]) -> (String, String, i32) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rahore"));
    cmd.args(args).env_remove("RAHORE_CONFIG");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    (
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
        out.status.code().unwrap(),
    )
}

#[test]
fn missing_corpus_exits_one_and_names_path() {
    let (_, err, code) = rahore(
        &[
            "--corpus",
            "/nonexistent/corpus.jsonl",
            "retrieve",
            "--query",
            "user: hi",
        ],
        &[],
    );
    assert_eq!(code, 1);
    assert!(err.contains("/nonexistent/corpus.jsonl"), "{err}");
}

#[test]
fn single_query_table_output() {
    let (out, err, code) = rahore(
        &[
            "--backend",
            "oracle_mock",
            "--corpus",
            &fixture("esconv_strategies.jsonl"),
            "retrieve",
            "--query",
            "user: I feel so alone since my friend moved away.",
            "--gold",
            "reflection_of_feelings",
            "-k",
            "2",
            "--format",
            "table",
        ],
        &[],
    );
    assert_eq!(code, 0, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains("reflection_of_feelings"));
}

#[test]
fn flag_beats_env_for_backend() {
    let corpus = fixture("esconv_strategies.jsonl");
    let args = [
        "--corpus",
        corpus.as_str(),
        "retrieve",
        "--query",
        "user: hi",
        "--gold",
        "question",
        "-k",
        "1",
    ];
    let env = [("RAHORE_BACKEND_KIND", "oracle_mock")];
    let (out, _, code) = rahore(&args, &env);
    assert_eq!(code, 0);
    assert!(out.contains("\"doc_id\":\"question\""), "{out}");

    let mut flagged = vec!["--backend", "mock"];
    flagged.extend_from_slice(&args);
    let (mock, _, code) = rahore(&flagged, &env);
    assert_eq!(code, 0);
    assert_ne!(out, mock);
}

#[test]
fn invalid_env_value_names_variable() {
    let (_, err, code) = rahore(&["warm"], &[("RAHORE_K", "three")]);
    assert_eq!(code, 1);
    assert!(err.contains("RAHORE_K"), "{err}");
}

#[test]
fn zero_k_is_rejected() {
    let (_, err, code) = rahore(
        &[
            "--corpus",
            &fixture("esconv_strategies.jsonl"),
            "eval",
            "-k",
            "0",
        ],
        &[],
    );
    assert_eq!(code, 1);
    assert!(err.contains("k must be"), "{err}");
}
