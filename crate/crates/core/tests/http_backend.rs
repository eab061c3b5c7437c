//! HttpBackend against an in-process OpenAI-compatible stub.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use rahore_core::backend::{Backend, BackendConfig, BackendError, HttpBackend, LogprobMode};
use rahore_core::fixtures::{esconv_strategies, sample_query};
use rahore_core::prompt::{render_for_query, PromptTemplate, RoleLabels};
use serde_json::{json, Value};

type Seen = Arc<Mutex<Vec<(Value, Option<String>)>>>;
type Reply = Arc<dyn Fn(&Value, usize) -> (StatusCode, Value) + Send + Sync>;

#[derive(Clone)]
struct Stub {
    seen: Seen,
    reply: Reply,
    delay: Duration,
}

async fn completions(
    State(s): State<Stub>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, Json<Value>) {
    let auth = headers
        .get("authorization")
        .map(|v| v.to_str().unwrap().to_string());
    let n = {
        let mut seen = s.seen.lock().unwrap();
        seen.push((body.clone(), auth));
        seen.len()
    };
    tokio::time::sleep(s.delay).await;
    let (status, v) = (s.reply)(&body, n);
    (status, Json(v))
}

async fn start(reply: Reply, delay: Duration) -> (String, Seen) {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let stub = Stub {
        seen: seen.clone(),
        reply,
        delay,
    };
    let app = Router::new()
        .route("/v1/completions", post(completions))
        .route("/v1/models", get(|| async { Json(json!({"data": []})) }))
        .with_state(stub);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}"), seen)
}

fn top_reply(top: Value, cached: u64) -> Value {
    json!({
        "choices": [{"text": " <T>", "logprobs": {"tokens": [" <T>"], "token_logprobs": [-0.2], "top_logprobs": [top]}}],
        "usage": {"prompt_tokens": 40, "completion_tokens": 1, "prompt_tokens_details": {"cached_tokens": cached}}
    })
}

fn config(url: &str, mode: LogprobMode) -> BackendConfig {
    BackendConfig {
        logprob_mode: mode,
        retry_backoff_ms: 1,
        request_timeout_secs: 2.0,
        ..BackendConfig::http(url, "stub-model")
    }
}

fn sample_prompt() -> rahore_core::prompt::RenderedPrompt {
    let corpus = esconv_strategies();
    render_for_query(
        &PromptTemplate::default(),
        &RoleLabels::default(),
        corpus.get("reflection_of_feelings").unwrap(),
        &sample_query(),
    )
}

#[tokio::test]
async fn missing_choice_gets_floor_and_request_is_exact() {
    let (url, seen) = start(
        Arc::new(|_, _| {
            (
                StatusCode::OK,
                top_reply(json!({" <T>": -0.2, "<": -1.5, "The": -3.0}), 12),
            )
        }),
        Duration::ZERO,
    )
    .await;
    std::env::set_var("RAHORE_TEST_KEY_A", "sk-test");
    let cfg = BackendConfig {
        api_key_env: Some("RAHORE_TEST_KEY_A".into()),
        ..config(&url, LogprobMode::TopLogprobs)
    };
    let backend = HttpBackend::new(&cfg).unwrap();
    let prompt = sample_prompt();
    let out = backend
        .score_choices(&prompt, &["<T>", "<F>"])
        .await
        .unwrap();

    assert_eq!(out.get("<T>"), Some(-0.2));
    assert_eq!(out.get("<F>"), Some(-100.0));
    assert!(out.choices[0].resolved && !out.choices[1].resolved);
    assert_eq!((out.prompt_tokens, out.cached_tokens), (40, 12));

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    let (body, auth) = &seen[0];
    assert_eq!(
        body,
        &json!({"model": "stub-model", "prompt": prompt.text, "max_tokens": 1, "logprobs": 20, "temperature": 0})
    );
    assert_eq!(
        body["prompt"].as_str().unwrap(),
        std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../fixtures/golden/sample_prompt.txt"
        ))
        .unwrap()
    );
    assert_eq!(auth.as_deref(), Some("Bearer sk-test"));
}

#[tokio::test]
async fn server_errors_are_retried() {
    let (url, seen) = start(
        Arc::new(|_, n| {
            if n < 3 {
                (
                    StatusCode::SERVICE_UNAVAILABLE,
                    json!({"error": {"message": "busy"}}),
                )
            } else {
                (
                    StatusCode::OK,
                    top_reply(json!({"<T>": -1.0, "<F>": -0.5}), 0),
                )
            }
        }),
        Duration::ZERO,
    )
    .await;
    let backend = HttpBackend::new(&config(&url, LogprobMode::TopLogprobs)).unwrap();
    let out = backend
        .score_choices(&sample_prompt(), &["<T>", "<F>"])
        .await
        .unwrap();
    assert_eq!(out.get("<F>"), Some(-0.5));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[tokio::test]
async fn retries_exhausted_reports_attempts() {
    let (url, _) = start(
        Arc::new(|_, _| (StatusCode::BAD_GATEWAY, json!({}))),
        Duration::ZERO,
    )
    .await;
    let cfg = BackendConfig {
        retry_attempts: 2,
        ..config(&url, LogprobMode::TopLogprobs)
    };
    let err = HttpBackend::new(&cfg)
        .unwrap()
        .score_choices(&sample_prompt(), &["<T>", "<F>"])
        .await
        .unwrap_err();
    assert!(
        matches!(err, BackendError::Transport { attempts: 2, .. }),
        "{err:?}"
    );
    assert!(err.is_retryable());
}

#[tokio::test]
async fn timeout_is_retryable_error() {
    let (url, _) = start(
        Arc::new(|_, _| (StatusCode::OK, top_reply(json!({}), 0))),
        Duration::from_millis(800),
    )
    .await;
    let cfg = BackendConfig {
        request_timeout_secs: 0.1,
        retry_attempts: 2,
        ..config(&url, LogprobMode::TopLogprobs)
    };
    let err = HttpBackend::new(&cfg)
        .unwrap()
        .score_choices(&sample_prompt(), &["<T>", "<F>"])
        .await
        .unwrap_err();
    assert_eq!(err, BackendError::Timeout { attempts: 2 });
}

#[tokio::test]
async fn logprobs_refusal_is_configuration_error() {
    let (url, seen) = start(
        Arc::new(|_, _| {
            (
                StatusCode::BAD_REQUEST,
                json!({"error": {"message": "logprobs is not supported for this model"}}),
            )
        }),
        Duration::ZERO,
    )
    .await;
    let err = HttpBackend::new(&config(&url, LogprobMode::Auto))
        .unwrap()
        .score_choices(&sample_prompt(), &["<T>", "<F>"])
        .await
        .unwrap_err();
    let BackendError::Configuration(msg) = &err else {
        panic!("{err:?}")
    };
    assert!(msg.contains("logprobs"));
    assert_eq!(seen.lock().unwrap().len(), 1, "4xx must not be retried");
}

#[tokio::test]
async fn response_without_logprobs_names_capability() {
    let (url, _) = start(
        Arc::new(|_, _| (StatusCode::OK, json!({"choices": [{"text": "x"}]}))),
        Duration::ZERO,
    )
    .await;
    let err = HttpBackend::new(&config(&url, LogprobMode::TopLogprobs))
        .unwrap()
        .score_choices(&sample_prompt(), &["<T>", "<F>"])
        .await
        .unwrap_err();
    assert!(
        matches!(&err, BackendError::Configuration(m) if m.contains("logprobs")),
        "{err:?}"
    );
}

/// Echo reply for `prompt + choice` split into the prompt, the choice's
/// characters (one token each), then one generated token.
fn echo_reply(body: &Value, per_char: f64) -> Value {
    let full = body["prompt"].as_str().unwrap();
    let cut = full.rfind('<').unwrap();
    let (head, tail) = full.split_at(cut);
    let mut tokens = vec![head.to_string()];
    let mut lps = vec![json!(null)];
    tokens.extend(tail.chars().map(|c| c.to_string()));
    lps.extend(tail.chars().map(|_| json!(per_char)));
    let mut offsets = vec![0usize];
    let mut at = head.chars().count();
    for _ in tail.chars() {
        offsets.push(at);
        at += 1;
    }
    tokens.push("\n".into());
    lps.push(json!(-9.0));
    offsets.push(at);
    json!({
        "choices": [{"text": "\n", "logprobs": {"tokens": tokens, "token_logprobs": lps, "text_offset": offsets, "top_logprobs": null}}],
        "usage": {"prompt_tokens": 41}
    })
}

#[tokio::test]
async fn echo_mode_sums_choice_tokens() {
    let (url, seen) = start(
        Arc::new(|body, _| {
            let per = if body["prompt"].as_str().unwrap().ends_with("<T>") {
                -0.1
            } else {
                -0.5
            };
            (StatusCode::OK, echo_reply(body, per))
        }),
        Duration::ZERO,
    )
    .await;
    let backend = HttpBackend::new(&config(&url, LogprobMode::Echo)).unwrap();
    let prompt = sample_prompt();
    let out = backend
        .score_choices(&prompt, &["<T>", "<F>"])
        .await
        .unwrap();
    assert!((out.get("<T>").unwrap() - -0.3).abs() < 1e-12);
    assert!((out.get("<F>").unwrap() - -1.5).abs() < 1e-12);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[0].0["echo"], json!(true));
    assert_eq!(seen[0].0["prompt"], json!(format!("{}<T>", prompt.text)));
}

#[tokio::test]
async fn auto_mode_falls_back_to_echo_when_no_choice_resolves() {
    let (url, seen) = start(
        Arc::new(|body, _| {
            if body.get("echo").is_some() {
                (StatusCode::OK, echo_reply(body, -0.2))
            } else {
                (
                    StatusCode::OK,
                    top_reply(json!({"The": -0.1, "I": -2.0}), 0),
                )
            }
        }),
        Duration::ZERO,
    )
    .await;
    let backend = HttpBackend::new(&config(&url, LogprobMode::Auto)).unwrap();
    let out = backend
        .score_choices(&sample_prompt(), &["<T>", "<F>"])
        .await
        .unwrap();
    assert!(out
        .choices
        .iter()
        .all(|c| c.resolved && c.logprob.is_finite()));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[tokio::test]
async fn health_and_prime() {
    let (url, seen) = start(
        Arc::new(|_, _| (StatusCode::OK, top_reply(json!({}), 0))),
        Duration::ZERO,
    )
    .await;
    let backend = HttpBackend::new(&config(&url, LogprobMode::Auto)).unwrap();
    backend.health().await.unwrap();
    let out = backend.prime_prefix("document: Question\n").await.unwrap();
    assert_eq!(out.prefix_tokens, 40);
    assert_eq!(
        seen.lock().unwrap()[0].0["prompt"],
        json!("document: Question\n")
    );

    let dead = HttpBackend::new(&config("http://127.0.0.1:9", LogprobMode::Auto)).unwrap();
    assert!(dead.health().await.is_err());
}
