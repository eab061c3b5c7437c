use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    check_choices, Backend, BackendConfig, BackendError, ChoiceLogProb, ChoiceLogProbs,
    PrimeOutcome,
};
use crate::prompt::RenderedPrompt;

/// Whitespace token count used by the mock backends.
pub fn mock_token_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// `per_token × (prompt_tokens − warm_tokens) + fixed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyModel {
    pub per_token_ms: f64,
    pub fixed_ms: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            per_token_ms: 0.1,
            fixed_ms: 0.0,
        }
    }
}

impl LatencyModel {
    pub fn new(per_token: Duration, fixed: Duration) -> Self {
        Self {
            per_token_ms: per_token.as_secs_f64() * 1e3,
            fixed_ms: fixed.as_secs_f64() * 1e3,
        }
    }

    pub fn latency_ms(&self, prompt_tokens: u64, warm_prefix_tokens: u64) -> f64 {
        let cold = prompt_tokens.saturating_sub(warm_prefix_tokens);
        self.per_token_ms * cold as f64 + self.fixed_ms
    }

    /// Latency of `prompt` when its first `warm_prefix_tokens` tokens are cached.
    pub fn mock_latency(&self, prompt: &RenderedPrompt, warm_prefix_tokens: u64) -> Duration {
        let ms = self.latency_ms(mock_token_count(&prompt.text), warm_prefix_tokens);
        Duration::from_secs_f64(ms / 1e3)
    }
}

/// Simulated server-side prefix cache.
#[derive(Debug, Default)]
struct PrefixCache {
    primed: HashSet<String>,
    recent: VecDeque<String>,
    capacity: usize,
}

impl PrefixCache {
    /// Token count of the longest cached prefix of `text`.
    fn warm_tokens(&self, text: &str) -> u64 {
        self.primed
            .iter()
            .chain(self.recent.iter())
            .filter(|p| text.starts_with(p.as_str()))
            .max_by_key(|p| p.len())
            .map(|p| mock_token_count(p))
            .unwrap_or(0)
    }

    fn touch(&mut self, prefix: &str) {
        if self.capacity == 0 || prefix.is_empty() || self.primed.contains(prefix) {
            return;
        }
        if let Some(pos) = self.recent.iter().position(|p| p == prefix) {
            let p = self.recent.remove(pos).expect("position is in range");
            self.recent.push_back(p);
            return;
        }
        if self.recent.len() == self.capacity {
            self.recent.pop_front();
        }
        self.recent.push_back(prefix.to_string());
    }
}

/// State shared by both mock kinds: latency model plus simulated cache.
#[derive(Debug)]
struct SimServer {
    latency: LatencyModel,
    cache: Mutex<PrefixCache>,
    max_concurrent: usize,
}

impl SimServer {
    fn new(config: &BackendConfig) -> Self {
        Self {
            latency: config.mock_latency,
            cache: Mutex::new(PrefixCache {
                capacity: config.auto_cache_capacity,
                ..PrefixCache::default()
            }),
            max_concurrent: config.max_concurrent_requests,
        }
    }

    /// Returns (prompt_tokens, cached_tokens, latency) and updates the cache.
    fn serve(&self, prompt: &RenderedPrompt) -> (u64, u64, Duration) {
        let mut cache = self.cache.lock().expect("cache lock poisoned");
        let prompt_tokens = mock_token_count(&prompt.text);
        let warm = cache.warm_tokens(&prompt.text).min(prompt_tokens);
        cache.touch(prompt.prefix());
        (prompt_tokens, warm, self.latency.mock_latency(prompt, warm))
    }

    fn prime(&self, prefix: &str) -> PrimeOutcome {
        let mut cache = self.cache.lock().expect("cache lock poisoned");
        cache.recent.retain(|p| p != prefix);
        cache.primed.insert(prefix.to_string());
        PrimeOutcome {
            prefix_tokens: mock_token_count(prefix),
        }
    }

    fn clear(&self) {
        let mut cache = self.cache.lock().expect("cache lock poisoned");
        cache.primed.clear();
        cache.recent.clear();
    }
}

/// Seeded pseudo-random log-probabilities in `[-20, 0]`, stable across
/// processes and platforms.
#[derive(Debug)]
pub struct MockBackend {
    seed: u64,
    server: SimServer,
}

impl MockBackend {
    pub fn new(config: &BackendConfig) -> Self {
        Self {
            seed: config.seed,
            server: SimServer::new(config),
        }
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(&BackendConfig::mock(seed))
    }

    pub fn latency_model(&self) -> LatencyModel {
        self.server.latency
    }

    pub fn clear_cache(&self) {
        self.server.clear()
    }

    fn logprob(&self, text: &str, choice: &str) -> f64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((text.len() as u64).to_le_bytes());
        h.update(text.as_bytes());
        h.update(choice.as_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        // 53 high bits → uniform in [0, 1).
        let unit = (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64;
        -20.0 * unit
    }
}

#[async_trait]
impl Backend for MockBackend {
    async fn score_choices(
        &self,
        prompt: &RenderedPrompt,
        choices: &[&str],
    ) -> Result<ChoiceLogProbs, BackendError> {
        check_choices(choices)?;
        let (prompt_tokens, cached_tokens, latency) = self.server.serve(prompt);
        Ok(ChoiceLogProbs {
            choices: choices
                .iter()
                .map(|c| ChoiceLogProb {
                    choice: c.to_string(),
                    logprob: self.logprob(&prompt.text, c),
                    resolved: true,
                })
                .collect(),
            prompt_tokens,
            cached_tokens,
            latency,
        })
    }

    async fn prime_prefix(&self, prefix: &str) -> Result<PrimeOutcome, BackendError> {
        Ok(self.server.prime(prefix))
    }

    async fn health(&self) -> Result<(), BackendError> {
        Ok(())
    }

    fn name(&self) -> &str {
        "mock"
    }

    fn max_concurrent_requests(&self) -> usize {
        self.server.max_concurrent
    }

    fn simulated_clock(&self) -> bool {
        true
    }
}

/// Shared `query_id → gold doc ids` table read by [`OracleBackend`].
#[derive(Debug, Clone, Default)]
pub struct GoldTable(Arc<RwLock<HashMap<String, HashSet<String>>>>);

impl GoldTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces the gold set for `query_id`.
    pub fn insert<I, S>(&self, query_id: impl Into<String>, gold: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set = gold.into_iter().map(Into::into).collect();
        self.0
            .write()
            .expect("gold table poisoned")
            .insert(query_id.into(), set);
    }

    pub fn extend_from_queries<'a>(&self, queries: impl IntoIterator<Item = &'a crate::Query>) {
        let mut map = self.0.write().expect("gold table poisoned");
        for q in queries {
            map.insert(q.id.clone(), q.gold_doc_ids.iter().cloned().collect());
        }
    }

    pub fn is_gold(&self, query_id: &str, doc_id: &str) -> bool {
        self.0
            .read()
            .expect("gold table poisoned")
            .get(query_id)
            .is_some_and(|s| s.contains(doc_id))
    }
}

/// Knows the answer: gold documents get `P(first choice) = 0.9`, all others
/// `0.1`. The first requested choice is the affirmative one, the second the
/// negative one; any further choices get the floor.
#[derive(Debug)]
pub struct OracleBackend {
    gold: GoldTable,
    floor: f64,
    server: SimServer,
}

pub const ORACLE_HIGH: f64 = 0.9;
pub const ORACLE_LOW: f64 = 0.1;

impl OracleBackend {
    pub fn new(config: &BackendConfig, gold: GoldTable) -> Self {
        Self {
            gold,
            floor: config.logprob_floor,
            server: SimServer::new(config),
        }
    }

    pub fn gold_table(&self) -> &GoldTable {
        &self.gold
    }

    pub fn clear_cache(&self) {
        self.server.clear()
    }
}

#[async_trait]
impl Backend for OracleBackend {
    async fn score_choices(
        &self,
        prompt: &RenderedPrompt,
        choices: &[&str],
    ) -> Result<ChoiceLogProbs, BackendError> {
        check_choices(choices)?;
        let gold = self.gold.is_gold(&prompt.query_id, &prompt.doc_id);
        let (p_yes, p_no) = if gold {
            (ORACLE_HIGH, ORACLE_LOW)
        } else {
            (ORACLE_LOW, ORACLE_HIGH)
        };
        let (prompt_tokens, cached_tokens, latency) = self.server.serve(prompt);
        Ok(ChoiceLogProbs {
            choices: choices
                .iter()
                .enumerate()
                .map(|(i, c)| ChoiceLogProb {
                    choice: c.to_string(),
                    logprob: match i {
                        0 => p_yes.ln(),
                        1 => p_no.ln(),
                        _ => self.floor,
                    },
                    resolved: i < 2,
                })
                .collect(),
            prompt_tokens,
            cached_tokens,
            latency,
        })
    }

    async fn prime_prefix(&self, prefix: &str) -> Result<PrimeOutcome, BackendError> {
        Ok(self.server.prime(prefix))
    }

    async fn health(&self) -> Result<(), BackendError> {
        Ok(())
    }

    fn name(&self) -> &str {
        "oracle_mock"
    }

    fn max_concurrent_requests(&self) -> usize {
        self.server.max_concurrent
    }

    fn simulated_clock(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{render_prompt, Document, PromptTemplate};

    fn prompt(doc: &str, q: &str) -> RenderedPrompt {
        render_prompt(
            &PromptTemplate::default(),
            &Document::new(doc, doc).unwrap(),
            "q1",
            q,
        )
    }

    fn block<F: std::future::Future>(f: F) -> F::Output {
        tokio::runtime::Builder::new_current_thread()
            .build()
            .unwrap()
            .block_on(f)
    }

    #[test]
    fn mock_is_deterministic_and_bounded() {
        let p = prompt("Question", "user: hi");
        let a = block(MockBackend::with_seed(7).score_choices(&p, &["<T>", "<F>"])).unwrap();
        let b = block(MockBackend::with_seed(7).score_choices(&p, &["<T>", "<F>"])).unwrap();
        assert_eq!(a, b);
        for c in &a.choices {
            assert!((-20.0..=0.0).contains(&c.logprob));
        }
        let other = block(MockBackend::with_seed(8).score_choices(&p, &["<T>", "<F>"])).unwrap();
        assert_ne!(a.choices, other.choices);
    }

    #[test]
    fn mock_values_are_frozen() {
        // Reference computed outside Rust: sha256(seed_le || len_le || text || choice).
        let m = MockBackend::with_seed(0);
        assert_eq!(m.logprob("document: a\n", "<T>"), -8.277949063527078);
        let p = prompt("Question", "user: hi");
        let r = block(m.score_choices(&p, &["<T>", "<F>"])).unwrap();
        assert_eq!(r.get("<T>"), Some(m.logprob(&p.text, "<T>")));
    }

    #[test]
    fn oracle_follows_table() {
        let gold = GoldTable::new();
        gold.insert("q1", ["Question"]);
        let oracle = OracleBackend::new(&BackendConfig::oracle(), gold);
        let g = block(oracle.score_choices(&prompt("Question", "x"), &["<T>", "<F>"])).unwrap();
        assert!(g.get("<T>").unwrap() > g.get("<F>").unwrap());
        let n = block(oracle.score_choices(&prompt("Other", "x"), &["<T>", "<F>"])).unwrap();
        assert!(n.get("<T>").unwrap() < n.get("<F>").unwrap());
    }

    #[test]
    fn latency_model_arithmetic() {
        let m = LatencyModel::new(Duration::from_millis(1), Duration::ZERO);
        assert!((m.latency_ms(100, 0) - 100.0).abs() < 1e-12);
        assert!((m.latency_ms(100, 60) - 40.0).abs() < 1e-12);
        let ratio = m.latency_ms(100, 60) / m.latency_ms(100, 0);
        assert!((ratio - 0.4).abs() < 1e-9);
        assert_eq!(m.latency_ms(10, 50), 0.0);
    }

    #[test]
    fn priming_warms_prefix() {
        let mock = MockBackend::with_seed(1);
        let p = prompt("Reflection of feelings", "user: I lost my job");
        let cold = block(mock.score_choices(&p, &["<T>", "<F>"])).unwrap();
        assert_eq!(cold.cached_tokens, 0);
        let primed = block(mock.prime_prefix(p.prefix())).unwrap();
        assert_eq!(primed.prefix_tokens, 4);
        let warm = block(mock.score_choices(&p, &["<T>", "<F>"])).unwrap();
        assert_eq!(warm.cached_tokens, 4);
        assert!(warm.latency < cold.latency);
        assert_eq!(warm.choices, cold.choices);
    }

    #[test]
    fn auto_cache_is_lru() {
        let mut cfg = BackendConfig::mock(0);
        cfg.auto_cache_capacity = 1;
        let mock = MockBackend::new(&cfg);
        let a = prompt("Alpha doc", "q");
        let b = prompt("Beta doc", "q");
        let s = |p: &RenderedPrompt| block(mock.score_choices(p, &["<T>", "<F>"])).unwrap();
        assert_eq!(s(&a).cached_tokens, 0);
        assert_eq!(s(&a).cached_tokens, 3);
        assert_eq!(s(&b).cached_tokens, 0);
        // b evicted a
        assert_eq!(s(&a).cached_tokens, 0);
    }
}
