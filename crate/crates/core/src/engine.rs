//! Retrieval orchestration.
//!
//! Every document in the corpus is scored pointwise against the query; there
//! is no candidate pruning. Calls are issued document-major when prompts put
//! the document first, so each document prefix is decoded once and then served
//! from the backend's prefix cache.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant, SystemTime};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::backend::{mock_token_count, Backend, BackendError, ChoiceLogProbs};
use crate::prompt::{
    flatten_query, render_prompt, Corpus, DomainError, PromptOrder, PromptTemplate, Query,
    RenderedPrompt, RoleLabels,
};
use crate::scoring::{rank_indices, relevance, Normalization, RelevanceScore};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("query `{query_id}`: {} document(s) left unscored ({}): {cause}", unscored.len(), unscored.join(", "))]
    PartialFailure {
        query_id: String,
        unscored: Vec<String>,
        cause: BackendError,
    },
    #[error("{0}")]
    Usage(String),
    #[error("unknown document `{0}`")]
    UnknownDocument(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchedulingPolicy {
    /// Document-major for doc-first prompts, query-major otherwise.
    #[default]
    Auto,
    DocumentMajor,
    QueryMajor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanOrder {
    DocumentMajor,
    QueryMajor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedCall {
    pub query: usize,
    pub doc: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub order: PlanOrder,
    pub calls: Vec<PlannedCall>,
    pub max_concurrency: usize,
}

/// Orders `(query, document)` score calls. Document-major runs every query
/// against `d1`, then `d2`, and so on.
pub fn schedule(
    n_queries: usize,
    n_docs: usize,
    order: PlanOrder,
    max_concurrency: usize,
) -> ExecutionPlan {
    let calls = match order {
        PlanOrder::DocumentMajor => (0..n_docs)
            .flat_map(|doc| (0..n_queries).map(move |query| PlannedCall { query, doc }))
            .collect(),
        PlanOrder::QueryMajor => (0..n_queries)
            .flat_map(|query| (0..n_docs).map(move |doc| PlannedCall { query, doc }))
            .collect(),
    };
    ExecutionPlan {
        order,
        calls,
        max_concurrency: max_concurrency.max(1),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prefix_token_estimate: u64,
    pub warm: bool,
    pub last_used: SystemTime,
}

/// Engine-side view of which document prefixes the backend holds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheLedger {
    pub entries: BTreeMap<String, CacheEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub documents: usize,
    pub warm: usize,
    pub prefix_tokens: u64,
}

impl CacheLedger {
    pub fn warm_count(&self) -> usize {
        self.entries.values().filter(|e| e.warm).count()
    }

    pub fn is_warm(&self, doc_id: &str) -> bool {
        self.entries.get(doc_id).is_some_and(|e| e.warm)
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            documents: self.entries.len(),
            warm: self.warm_count(),
            prefix_tokens: self
                .entries
                .values()
                .filter(|e| e.warm)
                .map(|e| e.prefix_token_estimate)
                .sum(),
        }
    }

    /// Marks entries unused for longer than `ttl` as cold.
    pub fn expire(&mut self, now: SystemTime, ttl: Duration) -> usize {
        let mut n = 0;
        for e in self.entries.values_mut() {
            let age = now.duration_since(e.last_used).unwrap_or_default();
            if e.warm && age > ttl {
                e.warm = false;
                n += 1;
            }
        }
        n
    }

    fn record_use(&mut self, doc_id: &str, cached_tokens: u64, now: SystemTime) {
        match self.entries.get_mut(doc_id) {
            Some(e) => {
                e.last_used = now;
                if cached_tokens > 0 {
                    e.warm = true;
                    e.prefix_token_estimate = e.prefix_token_estimate.max(cached_tokens);
                }
            }
            None if cached_tokens > 0 => {
                self.entries.insert(
                    doc_id.to_string(),
                    CacheEntry {
                        prefix_token_estimate: cached_tokens,
                        warm: true,
                        last_used: now,
                    },
                );
            }
            None => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDocument {
    pub doc_id: String,
    pub s_true: f64,
    pub s_false: f64,
    pub s_rel: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentTiming {
    pub doc_id: String,
    pub latency_ms: f64,
    pub prompt_tokens: u64,
    pub cached_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Sum of per-document backend latencies.
    pub total_ms: f64,
    /// Measured only for real backends; absent under simulated clocks so
    /// serialized results stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
    pub prompt_tokens: u64,
    pub cached_tokens: u64,
    /// Corpus order.
    pub per_document: Vec<DocumentTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ranking: Vec<ScoredDocument>,
    pub timing: Timing,
    #[serde(skip)]
    pub normalization: Normalization,
}

impl RetrievalResult {
    pub fn top(&self, k: usize) -> &[ScoredDocument] {
        &self.ranking[..k.min(self.ranking.len())]
    }

    /// Copy whose ranking keeps only the first `k` entries.
    pub fn truncated(&self, k: usize) -> RetrievalResult {
        RetrievalResult {
            ranking: self.top(k).to_vec(),
            ..self.clone()
        }
    }

    pub fn rank_of(&self, doc_id: &str) -> Option<usize> {
        self.ranking
            .iter()
            .find(|r| r.doc_id == doc_id)
            .map(|r| r.rank)
    }

    pub fn score_of(&self, doc_id: &str) -> Option<RelevanceScore> {
        self.ranking
            .iter()
            .find(|r| r.doc_id == doc_id)
            .map(|r| RelevanceScore {
                s_true: r.s_true,
                s_false: r.s_false,
                s_rel: r.s_rel,
                normalization: self.normalization,
                clamped: false,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub template: PromptTemplate,
    pub roles: RoleLabels,
    pub normalization: Normalization,
    pub scheduling: SchedulingPolicy,
    /// Ledger entries idle longer than this are marked cold. `None` keeps them.
    pub cache_ttl_secs: Option<f64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            template: PromptTemplate::default(),
            roles: RoleLabels::default(),
            normalization: Normalization::ProbSoftmax,
            scheduling: SchedulingPolicy::Auto,
            cache_ttl_secs: None,
        }
    }
}

impl EngineConfig {
    pub fn with_template(template: PromptTemplate) -> Self {
        Self {
            template,
            ..Self::default()
        }
    }
}

pub struct Engine {
    backend: Arc<dyn Backend>,
    config: EngineConfig,
    ledger: RwLock<CacheLedger>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("backend", &self.backend.name())
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(backend: Arc<dyn Backend>, config: EngineConfig) -> Result<Self, EngineError> {
        config.template.validate()?;
        Ok(Self {
            backend,
            config,
            ledger: RwLock::new(CacheLedger::default()),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn ledger(&self) -> CacheLedger {
        self.ledger.read().expect("ledger poisoned").clone()
    }

    pub fn plan_order(&self) -> PlanOrder {
        match (self.config.scheduling, self.config.template.order) {
            (SchedulingPolicy::DocumentMajor, _) => PlanOrder::DocumentMajor,
            (SchedulingPolicy::QueryMajor, _) => PlanOrder::QueryMajor,
            (SchedulingPolicy::Auto, PromptOrder::DocFirst) => PlanOrder::DocumentMajor,
            (SchedulingPolicy::Auto, PromptOrder::QueryFirst) => PlanOrder::QueryMajor,
        }
    }

    pub fn schedule(&self, n_queries: usize, corpus: &Corpus) -> ExecutionPlan {
        schedule(
            n_queries,
            corpus.len(),
            self.plan_order(),
            self.backend.max_concurrent_requests(),
        )
    }

    pub fn render(&self, query: &Query, query_text: &str, corpus: &Corpus) -> Vec<RenderedPrompt> {
        corpus
            .iter()
            .map(|d| render_prompt(&self.config.template, d, &query.id, query_text))
            .collect()
    }

    /// Scores a single (query, document) pair.
    pub async fn score_pair(
        &self,
        query: &Query,
        corpus: &Corpus,
        doc_id: &str,
    ) -> Result<RelevanceScore, EngineError> {
        let doc = corpus
            .get(doc_id)
            .ok_or_else(|| EngineError::UnknownDocument(doc_id.to_string()))?;
        let text = flatten_query(query, &self.config.roles);
        let prompt = render_prompt(&self.config.template, doc, &query.id, &text);
        let out = self
            .backend
            .score_choices(&prompt, &self.config.template.choices())
            .await?;
        self.ledger.write().expect("ledger poisoned").record_use(
            doc_id,
            out.cached_tokens,
            SystemTime::now(),
        );
        Ok(self.relevance_of(&out))
    }

    fn relevance_of(&self, out: &ChoiceLogProbs) -> RelevanceScore {
        let t = &self.config.template;
        let s_true = out.get(&t.true_token).expect("backend covers every choice");
        let s_false = out
            .get(&t.false_token)
            .expect("backend covers every choice");
        relevance(s_true, s_false, self.config.normalization)
    }

    /// Scores every corpus document against `query` and ranks them.
    pub async fn retrieve(
        &self,
        query: &Query,
        corpus: &Corpus,
        k: usize,
    ) -> Result<RetrievalResult, EngineError> {
        let mut results = self
            .retrieve_batch(std::slice::from_ref(query), corpus, k)
            .await?;
        results.pop().expect("one result per query")
    }

    /// Runs all queries through one execution plan. The outer error covers
    /// invalid arguments; each query can fail on its own.
    pub async fn retrieve_batch(
        &self,
        queries: &[Query],
        corpus: &Corpus,
        k: usize,
    ) -> Result<Vec<Result<RetrievalResult, EngineError>>, EngineError> {
        if k == 0 {
            return Err(EngineError::Usage("k must be >= 1".into()));
        }
        for q in queries {
            q.validate()?;
        }
        let plan = self.schedule(queries.len(), corpus);
        self.execute(queries, corpus, &plan).await
    }

    /// Executes an explicit plan. Rankings do not depend on the plan order.
    pub async fn execute(
        &self,
        queries: &[Query],
        corpus: &Corpus,
        plan: &ExecutionPlan,
    ) -> Result<Vec<Result<RetrievalResult, EngineError>>, EngineError> {
        self.expire_ledger();
        let texts: Vec<String> = queries
            .iter()
            .map(|q| flatten_query(q, &self.config.roles))
            .collect();
        let template = &self.config.template;
        let choices = template.choices();
        let started = Instant::now();

        let outcomes: Vec<(PlannedCall, Result<ChoiceLogProbs, BackendError>)> =
            stream::iter(plan.calls.iter().copied())
                .map(|call| {
                    let prompt = render_prompt(
                        template,
                        &corpus.documents()[call.doc],
                        &queries[call.query].id,
                        &texts[call.query],
                    );
                    let backend = &self.backend;
                    let choices = &choices;
                    async move { (call, backend.score_choices(&prompt, choices).await) }
                })
                .buffered(plan.max_concurrency)
                .collect()
                .await;
        let wall = started.elapsed();

        let mut grid: Vec<Vec<Option<Result<ChoiceLogProbs, BackendError>>>> = (0..queries.len())
            .map(|_| vec![None; corpus.len()])
            .collect();
        {
            let now = SystemTime::now();
            let mut ledger = self.ledger.write().expect("ledger poisoned");
            for (call, out) in outcomes {
                if let Ok(o) = &out {
                    ledger.record_use(&corpus.documents()[call.doc].id, o.cached_tokens, now);
                }
                grid[call.query][call.doc] = Some(out);
            }
        }

        let wall_ms = (!self.backend.simulated_clock()).then(|| ms(wall));
        Ok(queries
            .iter()
            .zip(grid)
            .map(|(q, row)| self.assemble(q, corpus, row, wall_ms))
            .collect())
    }

    fn assemble(
        &self,
        query: &Query,
        corpus: &Corpus,
        row: Vec<Option<Result<ChoiceLogProbs, BackendError>>>,
        wall_clock_ms: Option<f64>,
    ) -> Result<RetrievalResult, EngineError> {
        let mut unscored = Vec::new();
        let mut cause = None;
        let mut scored = Vec::with_capacity(row.len());
        for (doc, out) in corpus.iter().zip(row) {
            match out {
                Some(Ok(o)) => scored.push(o),
                Some(Err(e)) => {
                    unscored.push(doc.id.clone());
                    cause.get_or_insert(e);
                }
                None => {
                    unscored.push(doc.id.clone());
                    cause.get_or_insert(BackendError::InvalidRequest(
                        "pair missing from execution plan".into(),
                    ));
                }
            }
        }
        if let Some(cause) = cause {
            return Err(EngineError::PartialFailure {
                query_id: query.id.clone(),
                unscored,
                cause,
            });
        }

        let scores: Vec<RelevanceScore> = scored.iter().map(|o| self.relevance_of(o)).collect();
        let ranking = rank_indices(&scores)
            .into_iter()
            .enumerate()
            .map(|(pos, i)| ScoredDocument {
                doc_id: corpus.documents()[i].id.clone(),
                s_true: scores[i].s_true,
                s_false: scores[i].s_false,
                s_rel: scores[i].s_rel,
                rank: pos + 1,
            })
            .collect();
        let per_document: Vec<DocumentTiming> = corpus
            .iter()
            .zip(&scored)
            .map(|(d, o)| DocumentTiming {
                doc_id: d.id.clone(),
                latency_ms: ms(o.latency),
                prompt_tokens: o.prompt_tokens,
                cached_tokens: o.cached_tokens,
            })
            .collect();
        Ok(RetrievalResult {
            query_id: query.id.clone(),
            ranking,
            timing: Timing {
                total_ms: per_document.iter().map(|t| t.latency_ms).sum(),
                wall_clock_ms,
                prompt_tokens: per_document.iter().map(|t| t.prompt_tokens).sum(),
                cached_tokens: per_document.iter().map(|t| t.cached_tokens).sum(),
                per_document,
            },
            normalization: self.config.normalization,
        })
    }

    /// Primes the backend's prefix cache with every document segment.
    pub async fn warm_cache(&self, corpus: &Corpus) -> Result<CacheLedger, EngineError> {
        let template = &self.config.template;
        if template.order != PromptOrder::DocFirst {
            return Err(EngineError::Usage(
                "warm_cache requires document-first prompts (D before Q); \
                 query-first prompts share no document prefix"
                    .into(),
            ));
        }
        let prefixes: Vec<String> = corpus
            .iter()
            .map(|d| template.document_segment(d))
            .collect();
        let backend = &self.backend;
        let outcomes: Vec<_> = stream::iter(prefixes.iter().cloned())
            .map(|p| async move { backend.prime_prefix(&p).await })
            .buffered(self.backend.max_concurrent_requests().max(1))
            .collect()
            .await;

        let now = SystemTime::now();
        let mut ledger = self.ledger.write().expect("ledger poisoned");
        for ((doc, prefix), out) in corpus.iter().zip(&prefixes).zip(outcomes) {
            let reported = out?.prefix_tokens;
            let estimate = if reported > 0 {
                reported
            } else {
                mock_token_count(prefix).max(1)
            };
            ledger.entries.insert(
                doc.id.clone(),
                CacheEntry {
                    prefix_token_estimate: estimate,
                    warm: true,
                    last_used: now,
                },
            );
        }
        Ok(ledger.clone())
    }

    fn expire_ledger(&self) {
        if let Some(ttl) = self.config.cache_ttl_secs {
            let ttl = Duration::from_secs_f64(ttl.max(0.0));
            let n = self
                .ledger
                .write()
                .expect("ledger poisoned")
                .expire(SystemTime::now(), ttl);
            if n > 0 {
                tracing::debug!(expired = n, "cache ledger entries marked cold");
            }
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Fills `{strategy}` with the top document's text and `{query}` with the
/// flattened query. Placeholders inside substituted text are left alone.
pub fn augment_generation_prompt(
    query: &Query,
    top_doc_id: &str,
    corpus: &Corpus,
    gen_template: &str,
    roles: &RoleLabels,
) -> Result<String, EngineError> {
    let doc = corpus
        .get(top_doc_id)
        .ok_or_else(|| EngineError::UnknownDocument(top_doc_id.to_string()))?;
    let query_text = flatten_query(query, roles);
    let mut out = String::with_capacity(gen_template.len() + doc.text.len() + query_text.len());
    let mut rest = gen_template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(r) = tail.strip_prefix("{strategy}") {
            out.push_str(&doc.text);
            rest = r;
        } else if let Some(r) = tail.strip_prefix("{query}") {
            out.push_str(&query_text);
            rest = r;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}
