//! Strategy-retrieval datasets, positive/negative pair generation and
//! SFT/DPO export.
//!
//! Each query is paired with its gold documents (labelled with the true token)
//! and with mismatched documents from the pool (labelled with the false token).
//! `1:all` uses every mismatched document; `1:n` samples `n` per positive.

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::prompt::{
    render_for_query, Corpus, Document, DomainError, PromptTemplate, Query, RoleLabels,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordIssue {
    pub file: PathBuf,
    /// 1-based; 0 for file-level issues.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for RecordIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}: {}", self.file.display(), self.message)
        } else {
            write!(f, "{}:{}: {}", self.file.display(), self.line, self.message)
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {}: {error}", path.display())]
    Io { path: PathBuf, error: io::Error },
    #[error("invalid dataset:\n{}", issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid { issues: Vec<RecordIssue> },
    #[error("train fraction must be in (0, 1), got {0}")]
    InvalidFraction(f64),
}

#[derive(Debug, thiserror::Error)]
#[error("export failed after {written} line(s): {source}")]
pub struct ExportError {
    pub written: usize,
    #[source]
    pub source: io::Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalDataset {
    pub corpus: Corpus,
    pub queries: Vec<Query>,
    /// `None` for a dataset that has not been split.
    pub split: Option<Split>,
}

impl RetrievalDataset {
    pub fn new(corpus: Corpus, queries: Vec<Query>) -> Result<Self, DomainError> {
        for q in &queries {
            q.validate()?;
            q.check_gold(&corpus)?;
        }
        Ok(Self {
            corpus,
            queries,
            split: None,
        })
    }
}

fn read(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|error| DatasetError::Io {
        path: path.to_path_buf(),
        error,
    })
}

/// Non-blank lines with their 1-based line numbers.
fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_corpus(path: &Path, text: &str, issues: &mut Vec<RecordIssue>) -> Vec<Document> {
    let mut docs: Vec<Document> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let had_issues = !issues.is_empty();
    let mut issue = |line: usize, message: String| {
        issues.push(RecordIssue {
            file: path.to_path_buf(),
            line,
            message,
        })
    };
    for (line, rec) in records(text) {
        let doc: Document = match serde_json::from_str(rec) {
            Ok(d) => d,
            Err(e) => {
                issue(line, format!("malformed document record: {e}"));
                continue;
            }
        };
        if let Err(e) = doc.validate() {
            issue(line, e.to_string());
            continue;
        }
        if !seen.insert(doc.id.clone()) {
            issue(line, DomainError::DuplicateDocumentId(doc.id).to_string());
            continue;
        }
        docs.push(doc);
    }
    if docs.is_empty() && !had_issues && seen.is_empty() {
        issue(0, DomainError::EmptyCorpus.to_string());
    }
    docs
}

/// Reads a corpus JSONL file (`{"id", "text"}` per line).
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, DatasetError> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut issues = Vec::new();
    let docs = parse_corpus(path, &text, &mut issues);
    if !issues.is_empty() {
        return Err(DatasetError::Invalid { issues });
    }
    Corpus::new(docs).map_err(|e| DatasetError::Invalid {
        issues: vec![RecordIssue {
            file: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        }],
    })
}

/// Reads queries and validates them against `corpus`.
pub fn load_queries(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Vec<Query>, DatasetError> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut issues = Vec::new();
    let queries = parse_queries(path, &text, Some(corpus), &mut issues);
    if issues.is_empty() {
        Ok(queries)
    } else {
        Err(DatasetError::Invalid { issues })
    }
}

fn parse_queries(
    path: &Path,
    text: &str,
    corpus: Option<&Corpus>,
    issues: &mut Vec<RecordIssue>,
) -> Vec<Query> {
    let mut queries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut issue = |line: usize, message: String| {
        issues.push(RecordIssue {
            file: path.to_path_buf(),
            line,
            message,
        })
    };
    for (line, rec) in records(text) {
        let q: Query = match serde_json::from_str(rec) {
            Ok(q) => q,
            Err(e) => {
                issue(line, format!("malformed query record: {e}"));
                continue;
            }
        };
        if let Err(e) = q.validate() {
            issue(line, e.to_string());
            continue;
        }
        if !seen.insert(q.id.clone()) {
            issue(line, format!("duplicate query id `{}`", q.id));
            continue;
        }
        if let Some(c) = corpus {
            if let Err(e) = q.check_gold(c) {
                issue(line, e.to_string());
                continue;
            }
        }
        queries.push(q);
    }
    queries
}

/// Loads and validates a dataset. All invalid records from both files are
/// reported together.
pub fn load_dataset(
    corpus_path: impl AsRef<Path>,
    queries_path: impl AsRef<Path>,
) -> Result<RetrievalDataset, DatasetError> {
    let (cp, qp) = (corpus_path.as_ref(), queries_path.as_ref());
    let (ctext, qtext) = (read(cp)?, read(qp)?);
    let mut issues = Vec::new();
    let docs = parse_corpus(cp, &ctext, &mut issues);
    let corpus = Corpus::new(docs).ok();
    let queries = parse_queries(qp, &qtext, corpus.as_ref(), &mut issues);
    match corpus {
        Some(corpus) if issues.is_empty() => Ok(RetrievalDataset {
            corpus,
            queries,
            split: None,
        }),
        _ => Err(DatasetError::Invalid { issues }),
    }
}

/// Seeded shuffle into train and test. `|train| = round(fraction × |queries|)`;
/// each side keeps file order.
pub fn split(
    ds: &RetrievalDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(RetrievalDataset, RetrievalDataset), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(train_fraction));
    }
    let n = ds.queries.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let (train_idx, test_idx) = order.split_at(n_train);
    let pick = |idx: &[usize], split: Split| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        RetrievalDataset {
            corpus: ds.corpus.clone(),
            queries: idx.into_iter().map(|i| ds.queries[i].clone()).collect(),
            split: Some(split),
        }
    };
    Ok((pick(train_idx, Split::Train), pick(test_idx, Split::Test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ratio {
    OneToAll,
    OneToN(usize),
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::OneToAll => f.write_str("1:all"),
            Ratio::OneToN(n) => write!(f, "1:{n}"),
        }
    }
}

impl FromStr for Ratio {
    type Err = String;

    /// Accepts `all`, `1:all`, `n` or `1:n`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let body = s.strip_prefix("1:").unwrap_or(s);
        if body.eq_ignore_ascii_case("all") {
            return Ok(Ratio::OneToAll);
        }
        match body.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Ratio::OneToN(n)),
            _ => Err(format!(
                "invalid ratio `{s}`; expected all, 1:all, n or 1:n (n >= 1)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    pub ratio: Ratio,
    pub seed: u64,
}

impl PairSpec {
    pub fn new(ratio: Ratio, seed: u64) -> Self {
        Self { ratio, seed }
    }

    /// Negatives drawn for a query with `n_gold` golds out of `pool` mismatched
    /// documents.
    pub fn negatives_for(&self, n_gold: usize, pool: usize) -> usize {
        if n_gold == 0 {
            return 0;
        }
        match self.ratio {
            Ratio::OneToAll => pool,
            Ratio::OneToN(n) => (n * n_gold).min(pool),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledPair<'a> {
    pub query: &'a Query,
    pub document: &'a Document,
    pub is_positive: bool,
}

/// Per query: one positive per gold document, then negatives per `spec` in
/// corpus order. Queries without gold contribute nothing.
pub fn generate_pairs<'a>(ds: &'a RetrievalDataset, spec: &PairSpec) -> Vec<LabeledPair<'a>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pairs = Vec::new();
    for q in &ds.queries {
        let gold = q.gold_set();
        if gold.is_empty() {
            continue;
        }
        for g in &gold {
            let document = ds.corpus.get(g).expect("gold ids validated against corpus");
            pairs.push(LabeledPair {
                query: q,
                document,
                is_positive: true,
            });
        }
        let pool: Vec<&Document> = ds
            .corpus
            .iter()
            .filter(|d| !gold.contains(&d.id.as_str()))
            .collect();
        let want = spec.negatives_for(gold.len(), pool.len());
        let chosen: Vec<usize> = if want == pool.len() {
            (0..pool.len()).collect()
        } else {
            let mut idx = sample(&mut rng, pool.len(), want).into_vec();
            idx.sort_unstable();
            idx
        };
        pairs.extend(chosen.into_iter().map(|i| LabeledPair {
            query: q,
            document: pool[i],
            is_positive: false,
        }));
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportKind {
    Sft,
    Dpo,
}

impl FromStr for ExportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sft" => Ok(ExportKind::Sft),
            "dpo" => Ok(ExportKind::Dpo),
            _ => Err(format!("unknown export kind `{s}`; expected sft or dpo")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub query_id: String,
    pub doc_id: String,
    pub is_positive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainTarget {
    Sft { answer: String },
    Dpo { chosen: String, rejected: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub prompt: String,
    pub target: TrainTarget,
    pub provenance: Provenance,
}

impl TrainExample {
    pub fn from_pair(
        pair: &LabeledPair<'_>,
        template: &PromptTemplate,
        roles: &RoleLabels,
        kind: ExportKind,
    ) -> Self {
        let prompt = render_for_query(template, roles, pair.document, pair.query).text;
        let (yes, no) = (template.true_token.clone(), template.false_token.clone());
        let target = match (kind, pair.is_positive) {
            (ExportKind::Sft, true) => TrainTarget::Sft { answer: yes },
            (ExportKind::Sft, false) => TrainTarget::Sft { answer: no },
            (ExportKind::Dpo, true) => TrainTarget::Dpo {
                chosen: yes,
                rejected: no,
            },
            (ExportKind::Dpo, false) => TrainTarget::Dpo {
                chosen: no,
                rejected: yes,
            },
        };
        Self {
            prompt,
            target,
            provenance: Provenance {
                query_id: pair.query.id.clone(),
                doc_id: pair.document.id.clone(),
                is_positive: pair.is_positive,
            },
        }
    }
}

/// JSONL field names written by the exporter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportFields {
    pub sft_prompt: String,
    pub sft_answer: String,
    pub dpo_prompt: String,
    pub dpo_chosen: String,
    pub dpo_rejected: String,
}

impl Default for ExportFields {
    fn default() -> Self {
        Self {
            sft_prompt: "instruction".into(),
            sft_answer: "output".into(),
            dpo_prompt: "prompt".into(),
            dpo_chosen: "chosen".into(),
            dpo_rejected: "rejected".into(),
        }
    }
}

impl ExportFields {
    pub fn record(&self, ex: &TrainExample) -> Map<String, Value> {
        let mut m = Map::new();
        match &ex.target {
            TrainTarget::Sft { answer } => {
                m.insert(self.sft_prompt.clone(), Value::from(ex.prompt.as_str()));
                m.insert(self.sft_answer.clone(), Value::from(answer.as_str()));
            }
            TrainTarget::Dpo { chosen, rejected } => {
                m.insert(self.dpo_prompt.clone(), Value::from(ex.prompt.as_str()));
                m.insert(self.dpo_chosen.clone(), Value::from(chosen.as_str()));
                m.insert(self.dpo_rejected.clone(), Value::from(rejected.as_str()));
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportStats {
    pub lines: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Prompt lengths in characters; truncation to a context window is left to
    /// the trainer.
    pub prompt_chars_total: usize,
    pub prompt_chars_max: usize,
}

pub struct Exporter<'a> {
    pub template: &'a PromptTemplate,
    pub roles: &'a RoleLabels,
    pub kind: ExportKind,
    pub fields: &'a ExportFields,
}

impl Exporter<'_> {
    pub fn examples(&self, pairs: &[LabeledPair<'_>]) -> Vec<TrainExample> {
        pairs
            .iter()
            .map(|p| TrainExample::from_pair(p, self.template, self.roles, self.kind))
            .collect()
    }

    /// Writes one JSON line per pair. On failure, `written` counts the lines
    /// the writer accepted.
    pub fn write<W: Write>(
        &self,
        pairs: &[LabeledPair<'_>],
        mut out: W,
    ) -> Result<ExportStats, ExportError> {
        let mut stats = ExportStats::default();
        for pair in pairs {
            let ex = TrainExample::from_pair(pair, self.template, self.roles, self.kind);
            let line = serde_json::to_string(&self.fields.record(&ex))
                .expect("string maps always serialize");
            let wrote = out
                .write_all(line.as_bytes())
                .and_then(|_| out.write_all(b"\n"));
            if let Err(source) = wrote {
                return Err(ExportError {
                    written: stats.lines,
                    source,
                });
            }
            stats.lines += 1;
            if pair.is_positive {
                stats.positives += 1;
            } else {
                stats.negatives += 1;
            }
            let chars = ex.prompt.chars().count();
            stats.prompt_chars_total += chars;
            stats.prompt_chars_max = stats.prompt_chars_max.max(chars);
        }
        out.flush().map_err(|source| ExportError {
            written: stats.lines,
            source,
        })?;
        Ok(stats)
    }

    pub fn write_to_path(
        &self,
        pairs: &[LabeledPair<'_>],
        path: impl AsRef<Path>,
    ) -> Result<ExportStats, ExportError> {
        let file =
            fs::File::create(path.as_ref()).map_err(|source| ExportError { written: 0, source })?;
        self.write(pairs, BufWriter::new(file))
    }
}
