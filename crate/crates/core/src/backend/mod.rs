//! LLM backends that return log-probabilities for choice strings.
//!
//! Every backend answers one question: given a rendered prompt, how likely is
//! each choice string as the continuation? [`MockBackend`] and
//! [`OracleBackend`] are deterministic and model prefix caching with a linear
//! latency model; [`HttpBackend`] talks to an OpenAI-compatible
//! `/v1/completions` endpoint.

mod http;
mod mock;

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::prompt::RenderedPrompt;

pub use http::HttpBackend;
pub use mock::{mock_token_count, GoldTable, LatencyModel, MockBackend, OracleBackend};

pub const DEFAULT_LOGPROB_FLOOR: f64 = -100.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    /// The backend lacks a capability the client needs (e.g. logprobs).
    #[error("backend configuration error: {0}")]
    Configuration(String),
    #[error("backend rejected request ({status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("invalid scoring request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Transport { .. } | BackendError::Timeout { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceLogProb {
    pub choice: String,
    /// Natural log, ≤ 0.
    pub logprob: f64,
    /// False when the backend could not resolve the choice and the floor was used.
    pub resolved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceLogProbs {
    /// One entry per requested choice, in request order.
    pub choices: Vec<ChoiceLogProb>,
    pub prompt_tokens: u64,
    pub cached_tokens: u64,
    pub latency: Duration,
}

impl ChoiceLogProbs {
    pub fn get(&self, choice: &str) -> Option<f64> {
        self.choices
            .iter()
            .find(|c| c.choice == choice)
            .map(|c| c.logprob)
    }
}

/// Outcome of a cache-priming request for one document prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimeOutcome {
    pub prefix_tokens: u64,
}

#[async_trait]
pub trait Backend: Send + Sync {
    /// Log-probability of each choice string continuing the prompt. Multi-token
    /// choices sum their per-token log-probabilities.
    async fn score_choices(
        &self,
        prompt: &RenderedPrompt,
        choices: &[&str],
    ) -> Result<ChoiceLogProbs, BackendError>;

    /// Processes `prefix` so a prefix-caching server keeps its KV state.
    async fn prime_prefix(&self, prefix: &str) -> Result<PrimeOutcome, BackendError>;

    async fn health(&self) -> Result<(), BackendError>;

    fn name(&self) -> &str;

    fn max_concurrent_requests(&self) -> usize;

    /// Latencies come from a model rather than a clock, so results are
    /// reproducible byte for byte.
    fn simulated_clock(&self) -> bool {
        false
    }
}

pub(crate) fn check_choices(choices: &[&str]) -> Result<(), BackendError> {
    if choices.is_empty() {
        return Err(BackendError::InvalidRequest("no choices given".into()));
    }
    for (i, c) in choices.iter().enumerate() {
        if c.is_empty() {
            return Err(BackendError::InvalidRequest("empty choice string".into()));
        }
        if choices[..i].contains(c) {
            return Err(BackendError::InvalidRequest(format!(
                "duplicate choice `{c}`"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    OracleMock,
    HttpCompletions,
}

/// How the HTTP client extracts choice log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LogprobMode {
    /// Top-k alternatives, falling back to echo when no choice resolves.
    #[default]
    Auto,
    /// One `max_tokens=1` request; unmatched choices get the floor.
    TopLogprobs,
    /// One echo request per choice, summing the choice's token log-probabilities.
    Echo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub model: String,
    pub request_timeout_secs: f64,
    pub logprob_floor: f64,
    pub max_concurrent_requests: usize,
    pub top_logprobs: u32,
    pub logprob_mode: LogprobMode,
    pub retry_attempts: u32,
    pub retry_backoff_ms: u64,
    /// Seed for the plain mock.
    pub seed: u64,
    pub mock_latency: LatencyModel,
    /// Mock only: how many document prefixes the simulated server keeps
    /// automatically after serving them (LRU). Zero disables automatic caching;
    /// explicitly primed prefixes are always kept.
    pub auto_cache_capacity: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: None,
            api_key_env: None,
            model: "default".to_string(),
            request_timeout_secs: 30.0,
            logprob_floor: DEFAULT_LOGPROB_FLOOR,
            max_concurrent_requests: 8,
            top_logprobs: 20,
            logprob_mode: LogprobMode::Auto,
            retry_attempts: 3,
            retry_backoff_ms: 100,
            seed: 0,
            mock_latency: LatencyModel::default(),
            auto_cache_capacity: 0,
        }
    }
}

impl BackendConfig {
    pub fn mock(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn oracle() -> Self {
        Self {
            kind: BackendKind::OracleMock,
            ..Self::default()
        }
    }

    pub fn http(endpoint_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::HttpCompletions,
            endpoint_url: Some(endpoint_url.into()),
            model: model.into(),
            ..Self::default()
        }
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout_secs)
    }

    /// Returns `(field path, message)` pairs for every invalid field.
    pub fn validate(&self) -> Vec<(String, String)> {
        let mut errs = Vec::new();
        let mut bad = |field: &str, msg: &str| errs.push((field.to_string(), msg.to_string()));
        if self.logprob_floor.is_nan() || self.logprob_floor >= -10.0 {
            bad("logprob_floor", "must be < -10");
        }
        if self.max_concurrent_requests < 1 {
            bad("max_concurrent_requests", "must be >= 1");
        }
        if self.request_timeout_secs.is_nan() || self.request_timeout_secs <= 0.0 {
            bad("request_timeout_secs", "must be > 0");
        }
        if self.retry_attempts < 1 {
            bad("retry_attempts", "must be >= 1");
        }
        if self.top_logprobs < 1 {
            bad("top_logprobs", "must be >= 1");
        }
        if self.mock_latency.per_token_ms < 0.0 || self.mock_latency.fixed_ms < 0.0 {
            bad("mock_latency", "costs must be non-negative");
        }
        if self.kind == BackendKind::HttpCompletions {
            match &self.endpoint_url {
                None => bad("endpoint_url", "required for http_completions"),
                Some(u) if !(u.starts_with("http://") || u.starts_with("https://")) => {
                    bad("endpoint_url", "must be an http(s) URL")
                }
                Some(_) => {}
            }
        }
        errs
    }
}

/// Builds the backend described by `config`. Oracle backends read gold labels
/// from `gold`, which callers fill as queries arrive.
pub fn build_backend(
    config: &BackendConfig,
    gold: GoldTable,
) -> Result<Arc<dyn Backend>, BackendError> {
    if let Some((field, msg)) = config.validate().into_iter().next() {
        return Err(BackendError::Configuration(format!(
            "backend.{field}: {msg}"
        )));
    }
    Ok(match config.kind {
        BackendKind::Mock => Arc::new(MockBackend::new(config)),
        BackendKind::OracleMock => Arc::new(OracleBackend::new(config, gold)),
        BackendKind::HttpCompletions => Arc::new(HttpBackend::new(config)?),
    })
}
