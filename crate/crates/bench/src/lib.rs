//! Benchmark fixtures.

use std::sync::Arc;

use rahore_core::backend::{BackendConfig, MockBackend};
use rahore_core::datasets::RetrievalDataset;
use rahore_core::engine::{Engine, EngineConfig};
use rahore_core::fixtures::synthetic_esconv;

/// Synthetic dialogues over the eight support strategies.
pub fn dataset(n_queries: usize) -> RetrievalDataset {
    synthetic_esconv(n_queries, 2024)
}

/// Engine over a seeded mock backend with simulated latency.
pub fn mock_engine(config: EngineConfig) -> Engine {
    let backend = Arc::new(MockBackend::new(&BackendConfig::mock(11)));
    Engine::new(backend, config).expect("default engine config is valid")
}
