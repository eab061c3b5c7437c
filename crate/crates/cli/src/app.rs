//! The single engine path shared by CLI commands and the HTTP service.

use std::path::Path;
use std::sync::{Arc, RwLock};

use rahore_core::backend::{build_backend, Backend, BackendError, GoldTable};
use rahore_core::datasets::{self, DatasetError, RetrievalDataset};
use rahore_core::engine::{Engine, EngineError, LedgerSummary, RetrievalResult};
use rahore_core::prompt::{Corpus, DomainError, Query};
use rahore_core::scoring::RelevanceScore;

use crate::config::AppConfig;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    /// Request references documents the corpus does not contain, or is
    /// otherwise semantically invalid.
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Setup(String),
}

impl From<DomainError> for AppError {
    fn from(e: DomainError) -> Self {
        AppError::Unprocessable(e.to_string())
    }
}

impl From<BackendError> for AppError {
    fn from(e: BackendError) -> Self {
        AppError::Engine(EngineError::Backend(e))
    }
}

pub struct App {
    config: AppConfig,
    gold: GoldTable,
    engine: Engine,
    corpus: RwLock<Arc<Corpus>>,
}

impl std::fmt::Debug for App {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("App")
            .field("engine", &self.engine)
            .finish_non_exhaustive()
    }
}

fn corpus_path(config: &AppConfig) -> Result<&Path, AppError> {
    config.paths.corpus.as_deref().ok_or_else(|| {
        AppError::Setup("no corpus configured; set paths.corpus, RAHORE_CORPUS or --corpus".into())
    })
}

impl App {
    /// Loads the configured corpus and builds the configured backend.
    pub fn from_config(config: AppConfig) -> Result<Self, AppError> {
        let corpus = datasets::load_corpus(corpus_path(&config)?)?;
        Self::with_corpus(config, corpus)
    }

    pub fn with_corpus(config: AppConfig, corpus: Corpus) -> Result<Self, AppError> {
        let gold = GoldTable::new();
        let backend = build_backend(&config.backend, gold.clone())?;
        Self::with_backend(config, corpus, backend, gold)
    }

    /// Uses a caller-supplied backend; `gold` is filled from request queries.
    pub fn with_backend(
        config: AppConfig,
        corpus: Corpus,
        backend: Arc<dyn Backend>,
        gold: GoldTable,
    ) -> Result<Self, AppError> {
        let engine = Engine::new(backend, config.engine_config())?;
        Ok(Self {
            config,
            gold,
            engine,
            corpus: RwLock::new(Arc::new(corpus)),
        })
    }

    pub fn config(&self) -> &AppConfig {
        &self.config
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        self.engine.backend()
    }

    pub fn corpus(&self) -> Arc<Corpus> {
        self.corpus.read().expect("corpus lock poisoned").clone()
    }

    /// Re-reads the corpus file. Callers must keep retrievals out meanwhile.
    pub fn reload_corpus(&self) -> Result<usize, AppError> {
        let corpus = datasets::load_corpus(corpus_path(&self.config)?)?;
        let n = corpus.len();
        *self.corpus.write().expect("corpus lock poisoned") = Arc::new(corpus);
        Ok(n)
    }

    /// Queries file validated against the loaded corpus.
    pub fn load_queries(&self, path: Option<&Path>) -> Result<Vec<Query>, AppError> {
        let path = path
            .or(self.config.paths.queries.as_deref())
            .ok_or_else(|| {
                AppError::Setup(
                    "no queries configured; set paths.queries, RAHORE_QUERIES or --queries".into(),
                )
            })?;
        Ok(datasets::load_queries(path, &self.corpus())?)
    }

    /// Corpus plus queries; their gold labels are registered for the oracle
    /// backend.
    pub fn dataset(&self, queries_path: Option<&Path>) -> Result<RetrievalDataset, AppError> {
        let queries = self.load_queries(queries_path)?;
        self.gold.extend_from_queries(&queries);
        Ok(RetrievalDataset::new((*self.corpus()).clone(), queries)?)
    }

    fn admit(&self, query: &Query, corpus: &Corpus) -> Result<(), AppError> {
        query.validate()?;
        query.check_gold(corpus)?;
        self.gold
            .insert(query.id.clone(), query.gold_doc_ids.iter().cloned());
        Ok(())
    }

    /// Full pipeline for one query; the ranking is cut to `k`.
    pub async fn retrieve(&self, query: &Query, k: usize) -> Result<RetrievalResult, AppError> {
        let corpus = self.corpus();
        self.admit(query, &corpus)?;
        Ok(self.engine.retrieve(query, &corpus, k).await?.truncated(k))
    }

    /// One execution plan for all queries; each can fail on its own.
    pub async fn retrieve_many(
        &self,
        queries: &[Query],
        k: usize,
    ) -> Result<Vec<Result<RetrievalResult, AppError>>, AppError> {
        let corpus = self.corpus();
        for q in queries {
            self.admit(q, &corpus)?;
        }
        Ok(self
            .engine
            .retrieve_batch(queries, &corpus, k)
            .await?
            .into_iter()
            .map(|r| r.map(|r| r.truncated(k)).map_err(AppError::from))
            .collect())
    }

    pub async fn score(&self, query: &Query, doc_id: &str) -> Result<RelevanceScore, AppError> {
        let corpus = self.corpus();
        self.admit(query, &corpus)?;
        if corpus.get(doc_id).is_none() {
            return Err(AppError::Unprocessable(format!(
                "unknown document `{doc_id}`"
            )));
        }
        Ok(self.engine.score_pair(query, &corpus, doc_id).await?)
    }

    pub async fn warm(&self) -> Result<LedgerSummary, AppError> {
        let corpus = self.corpus();
        Ok(self.engine.warm_cache(&corpus).await?.summary())
    }

    pub async fn health(&self) -> Result<(), BackendError> {
        self.engine.backend().health().await
    }
}
