//! Domain types and the binary-choice prompt builder.
//!
//! A prompt is laid out as
//!
//! ```text
//! document: {D}
//! query: {Q}
//! {relevance instruction}
//! {choice instruction}
//! ```
//!
//! With [`PromptOrder::DocFirst`] every prompt rendered for the same document
//! shares the byte prefix `"document: {D}\n"`, which an inference server can
//! keep in its prefix KV cache.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

/// Default relevance instruction, kept verbatim (Q and D are not interpolated).
pub const RELEVANCE_INSTRUCTION: &str = "Can Q be appropriately responded with D?";
/// Default binary-choice instruction.
pub const CHOICE_INSTRUCTION: &str =
    "If you think the answer is true, choose <T>; otherwise choose <F>.";
pub const TRUE_TOKEN: &str = "<T>";
pub const FALSE_TOKEN: &str = "<F>";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DomainError {
    #[error("document id must be non-empty")]
    EmptyDocumentId,
    #[error("document `{0}` has empty text")]
    EmptyDocumentText(String),
    #[error("duplicate document id `{0}`")]
    DuplicateDocumentId(String),
    #[error("corpus must contain at least one document")]
    EmptyCorpus,
    #[error("query id must be non-empty")]
    EmptyQueryId,
    #[error("query `{0}` has an empty utterance")]
    EmptyUtterance(String),
    #[error("query `{query_id}` references unknown document `{doc_id}`")]
    UnknownGold { query_id: String, doc_id: String },
    #[error("invalid template: {0}")]
    Template(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, DomainError> {
        let doc = Self {
            id: id.into(),
            text: text.into(),
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.id.is_empty() {
            return Err(DomainError::EmptyDocumentId);
        }
        if self.text.trim().is_empty() {
            return Err(DomainError::EmptyDocumentText(self.id.clone()));
        }
        Ok(())
    }
}

/// One earlier dialogue turn. Serialized as a `[role, text]` pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(String, String)", into = "(String, String)")]
pub struct Turn {
    pub role: String,
    pub text: String,
}

impl Turn {
    pub fn new(role: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            text: text.into(),
        }
    }
}

impl From<(String, String)> for Turn {
    fn from((role, text): (String, String)) -> Self {
        Self { role, text }
    }
}

impl From<Turn> for (String, String) {
    fn from(t: Turn) -> Self {
        (t.role, t.text)
    }
}

/// A dialogue context: earlier turns plus the final user utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    #[serde(default)]
    pub history: Vec<Turn>,
    pub utterance: String,
    #[serde(rename = "gold", default)]
    pub gold_doc_ids: Vec<String>,
}

impl Query {
    pub fn new(id: impl Into<String>, utterance: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            history: Vec::new(),
            utterance: utterance.into(),
            gold_doc_ids: Vec::new(),
        }
    }

    pub fn with_history(mut self, history: Vec<Turn>) -> Self {
        self.history = history;
        self
    }

    pub fn with_gold<I, S>(mut self, gold: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.gold_doc_ids = gold.into_iter().map(Into::into).collect();
        self
    }

    /// Parses a flattened dialogue (`"{label}: {text}"` lines) back into turns.
    ///
    /// Lines without a recognised label continue the previous turn. The last
    /// turn must carry the user label and becomes the utterance; any other shape
    /// is taken as the utterance verbatim.
    pub fn from_flattened(id: impl Into<String>, text: &str, labels: &RoleLabels) -> Self {
        let id = id.into();
        let verbatim = |id: String| Query::new(id, text);
        let mut turns: Vec<Turn> = Vec::new();
        for line in text.lines() {
            match labels.parse_line(line) {
                Some((role, body)) => turns.push(Turn::new(role, body)),
                None => match turns.last_mut() {
                    Some(last) => {
                        last.text.push('\n');
                        last.text.push_str(line);
                    }
                    None => return verbatim(id),
                },
            }
        }
        match turns.pop() {
            Some(last) if last.role == labels.user_role => Query {
                id,
                history: turns,
                utterance: last.text,
                gold_doc_ids: Vec::new(),
            },
            _ => verbatim(id),
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.id.is_empty() {
            return Err(DomainError::EmptyQueryId);
        }
        if self.utterance.trim().is_empty() {
            return Err(DomainError::EmptyUtterance(self.id.clone()));
        }
        Ok(())
    }

    /// Gold ids with duplicates removed, first occurrence kept.
    pub fn gold_set(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.gold_doc_ids
            .iter()
            .map(String::as_str)
            .filter(|id| seen.insert(*id))
            .collect()
    }

    pub fn is_gold(&self, doc_id: &str) -> bool {
        self.gold_doc_ids.iter().any(|g| g == doc_id)
    }

    pub fn check_gold(&self, corpus: &Corpus) -> Result<(), DomainError> {
        for g in &self.gold_doc_ids {
            if corpus.get(g).is_none() {
                return Err(DomainError::UnknownGold {
                    query_id: self.id.clone(),
                    doc_id: g.clone(),
                });
            }
        }
        Ok(())
    }
}

/// The ordered document pool. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Document>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Result<Self, DomainError> {
        if documents.is_empty() {
            return Err(DomainError::EmptyCorpus);
        }
        let mut index = HashMap::with_capacity(documents.len());
        for (i, d) in documents.iter().enumerate() {
            d.validate()?;
            if index.insert(d.id.clone(), i).is_some() {
                return Err(DomainError::DuplicateDocumentId(d.id.clone()));
            }
        }
        Ok(Self { documents, index })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.index.get(id).map(|&i| &self.documents[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.documents.iter()
    }
}

impl Serialize for Corpus {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.documents.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Corpus {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let docs = Vec::<Document>::deserialize(d)?;
        Corpus::new(docs).map_err(serde::de::Error::custom)
    }
}

/// Maps dialogue roles to the labels written in front of each flattened turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleLabels {
    /// Role of the final utterance.
    pub user_role: String,
    pub labels: HashMap<String, String>,
}

impl Default for RoleLabels {
    fn default() -> Self {
        let labels = [
            ("user", "user"),
            ("assistant", "assistant"),
            ("seeker", "user"),
            ("supporter", "assistant"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Self {
            user_role: "user".to_string(),
            labels,
        }
    }
}

impl RoleLabels {
    /// Unknown roles are written as-is.
    pub fn label<'a>(&'a self, role: &'a str) -> &'a str {
        self.labels.get(role).map(String::as_str).unwrap_or(role)
    }

    fn parse_line<'a>(&self, line: &'a str) -> Option<(String, &'a str)> {
        let (label, body) = line.split_once(": ")?;
        if label == self.label(&self.user_role) {
            return Some((self.user_role.clone(), body));
        }
        // Prefer the role whose own name is the label, then any role mapping to it.
        if self.labels.get(label).is_some_and(|l| l == label) {
            return Some((label.to_string(), body));
        }
        let mut roles: Vec<&String> = self
            .labels
            .iter()
            .filter(|(_, l)| l.as_str() == label)
            .map(|(r, _)| r)
            .collect();
        roles.sort();
        roles.first().map(|r| ((*r).clone(), body))
    }
}

/// Renders history turns as `"{label}: {text}"` lines followed by the final
/// utterance under the user label.
pub fn flatten_query(query: &Query, labels: &RoleLabels) -> String {
    let mut out = String::new();
    for turn in &query.history {
        out.push_str(labels.label(&turn.role));
        out.push_str(": ");
        out.push_str(&turn.text);
        out.push('\n');
    }
    out.push_str(labels.label(&labels.user_role));
    out.push_str(": ");
    out.push_str(&query.utterance);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrder {
    /// Document segment first; prompts for one document share a prefix.
    #[default]
    DocFirst,
    QueryFirst,
}

impl std::fmt::Display for PromptOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PromptOrder::DocFirst => "doc_first",
            PromptOrder::QueryFirst => "query_first",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplate {
    pub order: PromptOrder,
    pub relevance_instruction: String,
    /// `None` drops the choice line (ablation).
    pub choice_instruction: Option<String>,
    pub true_token: String,
    pub false_token: String,
    pub document_label: String,
    pub query_label: String,
    pub separator: String,
    /// Substitute the standalone letters `Q`/`D` in the relevance instruction
    /// with the actual texts. Off by default.
    pub interpolate_relevance_instruction: bool,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            order: PromptOrder::DocFirst,
            relevance_instruction: RELEVANCE_INSTRUCTION.to_string(),
            choice_instruction: Some(CHOICE_INSTRUCTION.to_string()),
            true_token: TRUE_TOKEN.to_string(),
            false_token: FALSE_TOKEN.to_string(),
            document_label: "document: ".to_string(),
            query_label: "query: ".to_string(),
            separator: "\n".to_string(),
            interpolate_relevance_instruction: false,
        }
    }
}

impl PromptTemplate {
    pub fn with_order(mut self, order: PromptOrder) -> Self {
        self.order = order;
        self
    }

    pub fn without_choice_instruction(mut self) -> Self {
        self.choice_instruction = None;
        self
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.true_token.is_empty() || self.false_token.is_empty() {
            return Err(DomainError::Template(
                "choice tokens must be non-empty".into(),
            ));
        }
        if self.true_token == self.false_token {
            return Err(DomainError::Template(
                "true_token and false_token must differ".into(),
            ));
        }
        Ok(())
    }

    pub fn choices(&self) -> [&str; 2] {
        [&self.true_token, &self.false_token]
    }

    /// The shared document segment (`"document: {D}\n"`).
    pub fn document_segment(&self, doc: &Document) -> String {
        let mut s = String::with_capacity(
            self.document_label.len() + doc.text.len() + self.separator.len(),
        );
        s.push_str(&self.document_label);
        s.push_str(&doc.text);
        s.push_str(&self.separator);
        s
    }

    fn relevance_line(&self, doc: &Document, query_text: &str) -> String {
        if !self.interpolate_relevance_instruction {
            return self.relevance_instruction.clone();
        }
        replace_standalone_letters(&self.relevance_instruction, query_text, &doc.text)
    }
}

/// Replaces whole-word `Q` and `D` occurrences.
fn replace_standalone_letters(text: &str, q: &str, d: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len() + q.len() + d.len());
    for (i, &c) in chars.iter().enumerate() {
        let boundary_before = i == 0 || !chars[i - 1].is_alphanumeric();
        let boundary_after = i + 1 == chars.len() || !chars[i + 1].is_alphanumeric();
        match c {
            'Q' if boundary_before && boundary_after => out.push_str(q),
            'D' if boundary_before && boundary_after => out.push_str(d),
            _ => out.push(c),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    /// Bytes of `text` that depend only on (template, document). Zero for
    /// query-first prompts.
    pub prefix_len: usize,
    pub doc_id: String,
    pub query_id: String,
}

impl RenderedPrompt {
    pub fn prefix(&self) -> &str {
        &self.text[..self.prefix_len]
    }
}

pub fn render_prompt(
    template: &PromptTemplate,
    doc: &Document,
    query_id: &str,
    query_text: &str,
) -> RenderedPrompt {
    let sep = &template.separator;
    let doc_seg = template.document_segment(doc);
    let mut text = String::with_capacity(doc_seg.len() + query_text.len() + 160);

    let prefix_len = match template.order {
        PromptOrder::DocFirst => {
            text.push_str(&doc_seg);
            text.push_str(&template.query_label);
            text.push_str(query_text);
            text.push_str(sep);
            doc_seg.len()
        }
        PromptOrder::QueryFirst => {
            text.push_str(&template.query_label);
            text.push_str(query_text);
            text.push_str(sep);
            text.push_str(&doc_seg);
            0
        }
    };
    text.push_str(&template.relevance_line(doc, query_text));
    if let Some(choice) = &template.choice_instruction {
        text.push_str(sep);
        text.push_str(choice);
    }

    RenderedPrompt {
        text,
        prefix_len,
        doc_id: doc.id.clone(),
        query_id: query_id.to_string(),
    }
}

/// Flattens `query` and renders it against `doc`.
pub fn render_for_query(
    template: &PromptTemplate,
    labels: &RoleLabels,
    doc: &Document,
    query: &Query,
) -> RenderedPrompt {
    render_prompt(template, doc, &query.id, &flatten_query(query, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(text: &str) -> Document {
        Document::new("d", text).unwrap()
    }

    #[test]
    fn flatten_without_history() {
        let q = Query::new(
            "q",
            "Seriously! What I am scare of now is how to secure another job.",
        );
        assert_eq!(
            flatten_query(&q, &RoleLabels::default()),
            "user: Seriously! What I am scare of now is how to secure another job."
        );
    }

    #[test]
    fn flatten_with_history() {
        let q = Query::new("q", "hello").with_history(vec![Turn::new("assistant", "hi")]);
        assert_eq!(
            flatten_query(&q, &RoleLabels::default()),
            "assistant: hi\nuser: hello"
        );
    }

    #[test]
    fn flatten_line_count() {
        let q = Query::new("q", "four").with_history(vec![
            Turn::new("user", "one"),
            Turn::new("assistant", "two"),
            Turn::new("user", "three"),
        ]);
        assert_eq!(flatten_query(&q, &RoleLabels::default()).lines().count(), 4);
    }

    #[test]
    fn seeker_supporter_roles_map_to_user_assistant() {
        let q = Query::new("q", "b")
            .with_history(vec![Turn::new("seeker", "a"), Turn::new("supporter", "x")]);
        assert_eq!(
            flatten_query(&q, &RoleLabels::default()),
            "user: a\nassistant: x\nuser: b"
        );
    }

    #[test]
    fn from_flattened_inverts_flatten() {
        let labels = RoleLabels::default();
        let q = Query::new("q", "hello")
            .with_history(vec![Turn::new("user", "hey"), Turn::new("assistant", "hi")]);
        let flat = flatten_query(&q, &labels);
        let parsed = Query::from_flattened("q", &flat, &labels);
        assert_eq!(parsed, q);

        let raw = Query::from_flattened("q", "no labels here", &labels);
        assert_eq!(raw.utterance, "no labels here");
        assert!(raw.history.is_empty());
    }

    #[test]
    fn default_render_matches_layout() {
        let p = render_prompt(
            &PromptTemplate::default(),
            &doc("Reflection of feelings"),
            "q",
            "user: I lost my job",
        );
        assert_eq!(
            p.text,
            "document: Reflection of feelings\nquery: user: I lost my job\n\
             Can Q be appropriately responded with D?\n\
             If you think the answer is true, choose <T>; otherwise choose <F>."
        );
        assert_eq!(p.prefix(), "document: Reflection of feelings\n");
    }

    #[test]
    fn no_choice_instruction_drops_last_line() {
        let d = doc("Reflection of feelings");
        let full = render_prompt(&PromptTemplate::default(), &d, "q", "user: I lost my job");
        let short = render_prompt(
            &PromptTemplate::default().without_choice_instruction(),
            &d,
            "q",
            "user: I lost my job",
        );
        let expected = full.text.rsplit_once('\n').unwrap().0;
        assert_eq!(short.text, expected);
    }

    #[test]
    fn query_first_swaps_segments() {
        let p = render_prompt(
            &PromptTemplate::default().with_order(PromptOrder::QueryFirst),
            &doc("Information"),
            "q",
            "user: hi",
        );
        assert!(p
            .text
            .starts_with("query: user: hi\ndocument: Information\nCan Q"));
        assert_eq!(p.prefix_len, 0);
    }

    #[test]
    fn interpolation_toggle() {
        let t = PromptTemplate {
            interpolate_relevance_instruction: true,
            ..PromptTemplate::default()
        };
        let p = render_prompt(&t, &doc("Question"), "q", "user: hi");
        assert!(p
            .text
            .contains("Can user: hi be appropriately responded with Question?"));
    }

    #[test]
    fn template_rejects_equal_tokens() {
        let mut t = PromptTemplate::default();
        t.false_token = t.true_token.clone();
        assert!(t.validate().is_err());
        t.false_token.clear();
        assert!(t.validate().is_err());
    }

    #[test]
    fn corpus_rejects_duplicates_and_empties() {
        assert_eq!(Corpus::new(vec![]), Err(DomainError::EmptyCorpus));
        let d = Document {
            id: "a".into(),
            text: "x".into(),
        };
        assert!(matches!(
            Corpus::new(vec![d.clone(), d]),
            Err(DomainError::DuplicateDocumentId(_))
        ));
        assert!(Document::new("a", "   ").is_err());
        assert!(Document::new("", "x").is_err());
    }

    #[test]
    fn query_json_schema() {
        let q: Query = serde_json::from_str(
            r#"{"id":"q1","history":[["assistant","hi"]],"utterance":"hello","gold":["d1"]}"#,
        )
        .unwrap();
        assert_eq!(q.history, vec![Turn::new("assistant", "hi")]);
        assert_eq!(q.gold_doc_ids, vec!["d1"]);
        let back = serde_json::to_string(&q).unwrap();
        assert_eq!(
            back,
            r#"{"id":"q1","history":[["assistant","hi"]],"utterance":"hello","gold":["d1"]}"#
        );
    }

    proptest! {
        #[test]
        fn doc_first_prefix_depends_only_on_document(
            // Alphabets disjoint from the template text, so the document can
            // only match where it was placed.
            d in "[xz_]{1,30}",
            q1 in "[0-9 ]{0,40}",
            q2 in "[0-9 ]{0,40}",
        ) {
            let t = PromptTemplate::default();
            let d = Document::new("d", d).unwrap();
            let a = render_prompt(&t, &d, "q1", &q1);
            let b = render_prompt(&t, &d, "q2", &q2);
            prop_assert_eq!(a.prefix_len, b.prefix_len);
            let lcp = a.text.bytes().zip(b.text.bytes()).take_while(|(x, y)| x == y).count();
            prop_assert!(lcp >= a.prefix_len);
            prop_assert_eq!(a.text.matches(d.text.as_str()).count(), 1);
            prop_assert_eq!(render_prompt(&t, &d, "q1", &q1), a);
        }
    }
}
