//! Built-in sample data: the eight ESConv support strategies and a seeded
//! generator for synthetic strategy-retrieval datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::RetrievalDataset;
use crate::prompt::{Corpus, Document, Query, Turn};

/// `(id, text)` of the ESConv strategy pool, in the dataset's canonical order.
pub const ESCONV_STRATEGIES: [(&str, &str); 8] = [
    ("question", "Question"),
    ("restatement_or_paraphrasing", "Restatement or Paraphrasing"),
    ("reflection_of_feelings", "Reflection of feelings"),
    ("information", "Information"),
    ("self_disclosure", "Self-disclosure"),
    ("affirmation_and_reassurance", "Affirmation and Reassurance"),
    ("providing_suggestions", "Providing Suggestions"),
    ("others", "Others"),
];

pub const SAMPLE_UTTERANCE: &str =
    "Seriously! What I am scare of now is how to secure another job.";
pub const SAMPLE_GOLD: &str = "reflection_of_feelings";

pub fn esconv_strategies() -> Corpus {
    Corpus::new(
        ESCONV_STRATEGIES
            .iter()
            .map(|(id, text)| Document::new(*id, *text).expect("static fixture is valid"))
            .collect(),
    )
    .expect("static fixture is valid")
}

/// The worked ESConv example: a job-loss worry answered with reflection of
/// feelings.
pub fn sample_query() -> Query {
    Query::new("esconv-sample", SAMPLE_UTTERANCE).with_gold([SAMPLE_GOLD])
}

const OPENERS: [&str; 6] = [
    "I have been feeling low since",
    "I do not know what to do after",
    "Honestly I am scared because of",
    "My friends do not understand",
    "I keep thinking about",
    "It is hard to sleep after",
];

const TOPICS: [&str; 8] = [
    "losing my job last month",
    "the breakup with my partner",
    "my exams next week",
    "the argument with my sister",
    "moving to a new city",
    "the pandemic lockdown",
    "my dog getting sick",
    "money problems at home",
];

const REPLIES: [&str; 4] = [
    "I am here to listen.",
    "That sounds really difficult.",
    "Can you tell me more about it?",
    "Many people feel the same way.",
];

/// Seeded synthetic dataset over the ESConv strategy pool: `n_queries`
/// single-gold queries with 0–2 history turns each.
pub fn synthetic_esconv(n_queries: usize, seed: u64) -> RetrievalDataset {
    let corpus = esconv_strategies();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let queries = (0..n_queries)
        .map(|i| {
            let gold = &corpus.documents()[rng.random_range(0..corpus.len())].id;
            let n_hist = rng.random_range(0..3usize);
            let history = (0..n_hist)
                .map(|h| {
                    if h % 2 == 0 {
                        Turn::new("user", TOPICS[rng.random_range(0..TOPICS.len())])
                    } else {
                        Turn::new("assistant", REPLIES[rng.random_range(0..REPLIES.len())])
                    }
                })
                .collect();
            let utterance = format!(
                "{} {}.",
                OPENERS[rng.random_range(0..OPENERS.len())],
                TOPICS[rng.random_range(0..TOPICS.len())]
            );
            Query::new(format!("q{i:04}"), utterance)
                .with_history(history)
                .with_gold([gold.clone()])
        })
        .collect();
    RetrievalDataset::new(corpus, queries).expect("generated queries are valid")
}

/// Writes `ds` as corpus and query JSONL strings.
pub fn to_jsonl(ds: &RetrievalDataset) -> (String, String) {
    let mut corpus = String::new();
    for d in ds.corpus.iter() {
        corpus.push_str(&serde_json::to_string(d).expect("document serializes"));
        corpus.push('\n');
    }
    let mut queries = String::new();
    for q in &ds.queries {
        queries.push_str(&serde_json::to_string(q).expect("query serializes"));
        queries.push('\n');
    }
    (corpus, queries)
}
