pub mod backend;
pub mod datasets;
pub mod engine;
pub mod eval;
pub mod fixtures;
pub mod prompt;
pub mod scoring;

pub use prompt::{Corpus, Document, Query};
