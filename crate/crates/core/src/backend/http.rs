//! Client for OpenAI-compatible `/v1/completions` endpoints.
//!
//! Primary path: one request with `max_tokens=1` and `logprobs=K`, reading the
//! top-K alternatives of the first generated token. Echo path: one request per
//! choice with the choice appended to the prompt and `echo=true`, summing the
//! log-probabilities of the tokens that cover the appended choice.

use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use super::{
    check_choices, Backend, BackendConfig, BackendError, ChoiceLogProb, ChoiceLogProbs,
    LogprobMode, PrimeOutcome,
};
use crate::prompt::RenderedPrompt;

pub struct HttpBackend {
    client: reqwest::Client,
    base_url: String,
    api_key: Option<String>,
    model: String,
    floor: f64,
    top_logprobs: u32,
    mode: LogprobMode,
    retry_attempts: u32,
    retry_backoff: Duration,
    permits: Semaphore,
    max_concurrent: usize,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    #[serde(default)]
    choices: Vec<CompletionChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<serde_json::Map<String, Value>>>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

#[derive(Debug, Default, Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    prompt_tokens_details: Option<PromptTokensDetails>,
}

#[derive(Debug, Default, Deserialize)]
struct PromptTokensDetails {
    #[serde(default)]
    cached_tokens: Option<u64>,
}

impl Usage {
    fn cached(&self) -> u64 {
        self.prompt_tokens_details
            .as_ref()
            .and_then(|d| d.cached_tokens)
            .unwrap_or(0)
            .min(self.prompt_tokens)
    }
}

fn normalize(token: &str) -> &str {
    token.trim()
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        let base = config
            .endpoint_url
            .as_deref()
            .ok_or_else(|| BackendError::Configuration("endpoint_url is required".into()))?;
        let base_url = base
            .trim_end_matches('/')
            .trim_end_matches("/v1")
            .to_string();
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|k| !k.is_empty());
        let client = reqwest::Client::builder()
            .timeout(config.request_timeout())
            .build()
            .map_err(|e| BackendError::Configuration(format!("http client: {e}")))?;
        Ok(Self {
            client,
            base_url,
            api_key,
            model: config.model.clone(),
            floor: config.logprob_floor,
            top_logprobs: config.top_logprobs,
            mode: config.logprob_mode,
            retry_attempts: config.retry_attempts.max(1),
            retry_backoff: Duration::from_millis(config.retry_backoff_ms),
            permits: Semaphore::new(config.max_concurrent_requests.max(1)),
            max_concurrent: config.max_concurrent_requests.max(1),
        })
    }

    fn completions_url(&self) -> String {
        format!("{}/v1/completions", self.base_url)
    }

    /// POSTs `body`, retrying transport failures, timeouts and 5xx responses.
    async fn post(&self, body: &Value) -> Result<CompletionResponse, BackendError> {
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|_| BackendError::Configuration("backend closed".into()))?;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let err = match self.post_once(body, attempt).await {
                Ok(resp) => return Ok(resp),
                Err(e) if e.is_retryable() && attempt < self.retry_attempts => e,
                Err(e) => return Err(e),
            };
            let backoff = self.retry_backoff * 2u32.saturating_pow(attempt - 1);
            tracing::warn!(attempt, ?backoff, error = %err, "retrying completion request");
            tokio::time::sleep(backoff).await;
        }
    }

    async fn post_once(
        &self,
        body: &Value,
        attempts: u32,
    ) -> Result<CompletionResponse, BackendError> {
        let mut req = self.client.post(self.completions_url()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| transport(e, attempts))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| transport(e, attempts))?;
        if status.is_server_error() {
            return Err(BackendError::Transport {
                attempts,
                message: format!("HTTP {status}: {}", truncate(&text)),
            });
        }
        if !status.is_success() {
            let message = error_message(&text);
            if message.to_ascii_lowercase().contains("logprobs") {
                return Err(BackendError::Configuration(format!(
                    "backend refused the logprobs capability: {message}"
                )));
            }
            return Err(BackendError::Rejected {
                status: status.as_u16(),
                message,
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))
    }

    fn sanitize(&self, lp: Option<f64>) -> Option<f64> {
        lp.filter(|v| v.is_finite()).map(|v| v.min(0.0))
    }

    async fn score_top_logprobs(
        &self,
        prompt: &RenderedPrompt,
        choices: &[&str],
    ) -> Result<(Vec<ChoiceLogProb>, Usage), BackendError> {
        let body = json!({
            "model": self.model,
            "prompt": prompt.text,
            "max_tokens": 1,
            "logprobs": self.top_logprobs,
            "temperature": 0,
        });
        let resp = self.post(&body).await?;
        let alternatives = first_top_logprobs(&resp)?;
        let scored = choices
            .iter()
            .map(|choice| {
                let best = alternatives
                    .iter()
                    .filter(|(tok, _)| normalize(tok) == normalize(choice))
                    .filter_map(|(_, v)| self.sanitize(v.as_f64()))
                    .reduce(f64::max);
                ChoiceLogProb {
                    choice: choice.to_string(),
                    logprob: best.unwrap_or(self.floor),
                    resolved: best.is_some(),
                }
            })
            .collect();
        Ok((scored, resp.usage.unwrap_or_default()))
    }

    async fn score_echo(
        &self,
        prompt: &RenderedPrompt,
        choices: &[&str],
    ) -> Result<(Vec<ChoiceLogProb>, Usage), BackendError> {
        let mut out = Vec::with_capacity(choices.len());
        let mut usage = Usage::default();
        let mut cached = 0;
        for choice in choices {
            let full = format!("{}{}", prompt.text, choice);
            let body = json!({
                "model": self.model,
                "prompt": full,
                "max_tokens": 1,
                "logprobs": 1,
                "echo": true,
                "temperature": 0,
            });
            let resp = self.post(&body).await?;
            let lp = echo_logprobs(&resp)?;
            let sum = sum_choice_logprobs(
                lp,
                prompt.text.chars().count(),
                full.chars().count(),
                choice,
            )
            .and_then(|v| self.sanitize(Some(v)));
            if let Some(u) = &resp.usage {
                // Report the prompt alone: the appended choice is not prompt.
                if usage.prompt_tokens == 0 {
                    usage.prompt_tokens = u.prompt_tokens.saturating_sub(1);
                }
                cached = cached.max(u.cached());
            }
            out.push(ChoiceLogProb {
                choice: choice.to_string(),
                logprob: sum.unwrap_or(self.floor),
                resolved: sum.is_some(),
            });
        }
        usage.prompt_tokens_details = Some(PromptTokensDetails {
            cached_tokens: Some(cached),
        });
        Ok((out, usage))
    }
}

fn transport(e: reqwest::Error, attempts: u32) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout { attempts }
    } else {
        BackendError::Transport {
            attempts,
            message: e.to_string(),
        }
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn error_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| {
            v.pointer("/error/message")
                .or_else(|| v.get("message"))
                .or_else(|| v.get("detail"))
                .and_then(Value::as_str)
                .map(str::to_string)
        })
        .unwrap_or_else(|| truncate(body).to_string())
}

fn first_logprobs(resp: &CompletionResponse) -> Result<&Logprobs, BackendError> {
    let choice = resp
        .choices
        .first()
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    choice.logprobs.as_ref().ok_or_else(|| {
        BackendError::Configuration(
            "backend returned no logprobs; the logprobs capability is required".into(),
        )
    })
}

fn first_top_logprobs(
    resp: &CompletionResponse,
) -> Result<&serde_json::Map<String, Value>, BackendError> {
    first_logprobs(resp)?
        .top_logprobs
        .as_ref()
        .and_then(|t| t.first())
        .and_then(Option::as_ref)
        .ok_or_else(|| {
            BackendError::Configuration(
                "backend returned no top_logprobs; the logprobs capability is required".into(),
            )
        })
}

fn echo_logprobs(resp: &CompletionResponse) -> Result<&Logprobs, BackendError> {
    let lp = first_logprobs(resp)?;
    if lp.tokens.is_empty() || lp.tokens.len() != lp.token_logprobs.len() {
        return Err(BackendError::Configuration(
            "backend returned no echoed token logprobs; echo with logprobs is required".into(),
        ));
    }
    Ok(lp)
}

/// Sums log-probabilities of echoed tokens overlapping `[boundary, end)`
/// (character offsets). Without offsets, takes trailing prompt tokens until
/// their text covers the choice.
fn sum_choice_logprobs(lp: &Logprobs, boundary: usize, end: usize, choice: &str) -> Option<f64> {
    let n = lp.tokens.len();
    let mut sum = 0.0;
    let mut any = false;
    if lp.text_offset.len() == n {
        for i in 0..n {
            let start = lp.text_offset[i];
            let stop = lp
                .text_offset
                .get(i + 1)
                .copied()
                .unwrap_or(start + lp.tokens[i].chars().count());
            if start >= end {
                break;
            }
            if stop > boundary && stop > start {
                sum += lp.token_logprobs[i]?;
                any = true;
            }
        }
    } else {
        // The final echoed token is the generated one; walk back from before it.
        let mut covered = 0;
        let want = choice.chars().count();
        for i in (0..n.saturating_sub(1)).rev() {
            sum += lp.token_logprobs[i]?;
            any = true;
            covered += lp.tokens[i].chars().count();
            if covered >= want {
                break;
            }
        }
    }
    any.then_some(sum)
}

#[async_trait]
impl Backend for HttpBackend {
    async fn score_choices(
        &self,
        prompt: &RenderedPrompt,
        choices: &[&str],
    ) -> Result<ChoiceLogProbs, BackendError> {
        check_choices(choices)?;
        let started = Instant::now();
        let (scored, usage) = match self.mode {
            LogprobMode::TopLogprobs => self.score_top_logprobs(prompt, choices).await?,
            LogprobMode::Echo => self.score_echo(prompt, choices).await?,
            LogprobMode::Auto => {
                let (scored, usage) = self.score_top_logprobs(prompt, choices).await?;
                if scored.iter().any(|c| c.resolved) {
                    (scored, usage)
                } else {
                    tracing::debug!(doc = %prompt.doc_id, "no choice in top-k, using echo path");
                    self.score_echo(prompt, choices).await?
                }
            }
        };
        Ok(ChoiceLogProbs {
            choices: scored,
            prompt_tokens: usage.prompt_tokens,
            cached_tokens: usage.cached(),
            latency: started.elapsed(),
        })
    }

    async fn prime_prefix(&self, prefix: &str) -> Result<PrimeOutcome, BackendError> {
        let body = json!({
            "model": self.model,
            "prompt": prefix,
            "max_tokens": 1,
            "temperature": 0,
        });
        let resp = self.post(&body).await?;
        Ok(PrimeOutcome {
            prefix_tokens: resp.usage.map(|u| u.prompt_tokens).unwrap_or(0),
        })
    }

    async fn health(&self) -> Result<(), BackendError> {
        let mut req = self.client.get(format!("{}/v1/models", self.base_url));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| transport(e, 1))?;
        if resp.status().is_server_error() {
            return Err(BackendError::Transport {
                attempts: 1,
                message: format!("health check returned HTTP {}", resp.status()),
            });
        }
        Ok(())
    }

    fn name(&self) -> &str {
        "http_completions"
    }

    fn max_concurrent_requests(&self) -> usize {
        self.max_concurrent
    }
}
