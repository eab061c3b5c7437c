//! Ranking metrics, the prompt ablation grid, the positive:negative ratio
//! sweep and report rendering.

use std::fmt::Write as _;
use std::io;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::datasets::{
    generate_pairs, ExportFields, ExportKind, Exporter, PairSpec, Ratio, RetrievalDataset,
};
use crate::engine::{Engine, EngineConfig, EngineError, RetrievalResult};
use crate::prompt::{PromptOrder, Query, CHOICE_INSTRUCTION};
use crate::scoring::Normalization;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("query `{0}` has no gold documents")]
    NoGold(String),
    #[error("k must be >= 1")]
    InvalidK,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("[{config}] {source}")]
    Engine {
        config: String,
        #[source]
        source: EngineError,
    },
    #[error("{0}")]
    Invalid(String),
}

/// 1 if any gold document is ranked within the top `k`, else 0.
pub fn recall_at_k(result: &RetrievalResult, gold: &[&str], k: usize) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::InvalidK);
    }
    if gold.is_empty() {
        return Err(MetricError::NoGold(result.query_id.clone()));
    }
    let hit = result
        .top(k)
        .iter()
        .any(|r| gold.contains(&r.doc_id.as_str()));
    Ok(if hit { 1.0 } else { 0.0 })
}

/// `1 / rank` of the best-ranked gold document (0 if none is ranked).
pub fn reciprocal_rank(result: &RetrievalResult, gold: &[&str]) -> Result<f64, MetricError> {
    if gold.is_empty() {
        return Err(MetricError::NoGold(result.query_id.clone()));
    }
    Ok(result
        .ranking
        .iter()
        .filter(|r| gold.contains(&r.doc_id.as_str()))
        .map(|r| r.rank)
        .min()
        .map_or(0.0, |rank| 1.0 / rank as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub mean_cached_tokens: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over per-retrieval latencies.
    pub fn from_samples(latencies_ms: &[f64], cached_tokens: &[u64]) -> Self {
        if latencies_ms.is_empty() {
            return Self::default();
        }
        let mut s = latencies_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let pct = |p: f64| {
            let rank = ((p / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
            s[rank.min(s.len()) - 1]
        };
        Self {
            n: s.len(),
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p50_ms: pct(50.0),
            p90_ms: pct(90.0),
            p99_ms: pct(99.0),
            mean_cached_tokens: cached_tokens.iter().sum::<u64>() as f64
                / cached_tokens.len().max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub choice_instruction: bool,
    pub order: PromptOrder,
    pub normalization: Normalization,
    pub backend: String,
    pub warm_cache: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<Ratio>,
}

impl ReportConfig {
    pub fn for_engine(engine: &Engine, warm_cache: bool) -> Self {
        let c = engine.config();
        Self {
            choice_instruction: c.template.choice_instruction.is_some(),
            order: c.template.order,
            normalization: c.normalization,
            backend: engine.backend().name().to_string(),
            warm_cache,
            ratio: None,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "ibc={} order={} norm={}",
            if self.choice_instruction { "on" } else { "off" },
            self.order,
            self.normalization
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ReportConfig,
    /// `R@k` for each requested k, then `mrr`.
    pub metrics: Vec<Metric>,
    pub n_queries: usize,
    /// Queries without gold documents, left out of every metric.
    pub n_excluded: usize,
    pub latency: LatencyStats,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.name == name)
            .map(|m| m.value)
    }
}

fn metric(name: String, value: f64) -> Metric {
    Metric {
        name,
        value,
        percent: value * 100.0,
    }
}

/// Aggregates per-query metrics. Pairs are folded in `query_id` order.
pub fn aggregate(
    results: &[(&Query, &RetrievalResult)],
    k_list: &[usize],
    config: ReportConfig,
) -> Result<EvalReport, MetricError> {
    if k_list.contains(&0) {
        return Err(MetricError::InvalidK);
    }
    let mut ordered: Vec<_> = results.to_vec();
    ordered.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let mut recall_sums = vec![0.0; k_list.len()];
    let mut rr_sum = 0.0;
    let (mut n, mut excluded) = (0usize, 0usize);
    for (q, r) in &ordered {
        let gold = q.gold_set();
        if gold.is_empty() {
            excluded += 1;
            continue;
        }
        n += 1;
        for (sum, &k) in recall_sums.iter_mut().zip(k_list) {
            *sum += recall_at_k(r, &gold, k)?;
        }
        rr_sum += reciprocal_rank(r, &gold)?;
    }
    let mean = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
    let mut metrics: Vec<Metric> = k_list
        .iter()
        .zip(&recall_sums)
        .map(|(k, s)| metric(format!("R@{k}"), mean(*s)))
        .collect();
    metrics.push(metric("mrr".into(), mean(rr_sum)));

    let lat: Vec<f64> = ordered.iter().map(|(_, r)| r.timing.total_ms).collect();
    let cached: Vec<u64> = ordered
        .iter()
        .map(|(_, r)| r.timing.cached_tokens)
        .collect();
    Ok(EvalReport {
        config,
        metrics,
        n_queries: n,
        n_excluded: excluded,
        latency: LatencyStats::from_samples(&lat, &cached),
    })
}

/// Retrieves every query of `ds` and aggregates the metrics.
pub async fn evaluate(
    engine: &Engine,
    ds: &RetrievalDataset,
    k_list: &[usize],
    warm_cache: bool,
) -> Result<EvalReport, EvalError> {
    let config = ReportConfig::for_engine(engine, warm_cache);
    let wrap = |source: EngineError| EvalError::Engine {
        config: config.label(),
        source,
    };
    if warm_cache {
        engine.warm_cache(&ds.corpus).await.map_err(wrap)?;
    }
    let outcomes = engine
        .retrieve_batch(&ds.queries, &ds.corpus, 1)
        .await
        .map_err(wrap)?;
    let results: Vec<RetrievalResult> = outcomes
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(wrap)?;
    let pairs: Vec<_> = ds.queries.iter().zip(&results).collect();
    aggregate(&pairs, k_list, config.clone()).map_err(|e| EvalError::Invalid(e.to_string()))
}

/// The four prompt configurations: choice instruction off/on × query-first /
/// document-first, in that row order.
pub const ABLATION_CONFIGS: [(bool, PromptOrder); 4] = [
    (false, PromptOrder::QueryFirst),
    (false, PromptOrder::DocFirst),
    (true, PromptOrder::QueryFirst),
    (true, PromptOrder::DocFirst),
];

/// Runs [`ABLATION_CONFIGS`] with identical score extraction. Document-first
/// rows warm the prefix cache before retrieval.
pub async fn ablation_grid(
    ds: &RetrievalDataset,
    backend: Arc<dyn Backend>,
    base: &EngineConfig,
    k_list: &[usize],
) -> Result<Vec<EvalReport>, EvalError> {
    let mut rows = Vec::with_capacity(ABLATION_CONFIGS.len());
    for (ibc, order) in ABLATION_CONFIGS {
        let mut config = base.clone();
        config.template.order = order;
        config.template.choice_instruction = if ibc {
            Some(
                base.template
                    .choice_instruction
                    .clone()
                    .unwrap_or_else(|| CHOICE_INSTRUCTION.to_string()),
            )
        } else {
            None
        };
        let engine = Engine::new(backend.clone(), config).map_err(|source| EvalError::Engine {
            config: format!("ibc={ibc} order={order}"),
            source,
        })?;
        let warm = order == PromptOrder::DocFirst;
        rows.push(evaluate(&engine, ds, k_list, warm).await?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub ratio: Ratio,
    pub pairs: usize,
    pub positives: usize,
    pub negatives: usize,
    pub prompt_chars_total: usize,
    pub prompt_chars_max: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
}

/// Pair counts and export sizes per ratio. When `checkpoints` is given (one
/// backend per ratio, e.g. a model fine-tuned on that ratio's export), each
/// is also evaluated on `eval_ds`.
pub async fn sensitivity_sweep(
    train_ds: &RetrievalDataset,
    eval_ds: &RetrievalDataset,
    base: &EngineConfig,
    ratios: &[PairSpec],
    checkpoints: Option<&[Arc<dyn Backend>]>,
    k_list: &[usize],
) -> Result<Vec<SensitivityRow>, EvalError> {
    if let Some(c) = checkpoints {
        if c.len() != ratios.len() {
            return Err(EvalError::Invalid(format!(
                "{} checkpoint backend(s) for {} ratio(s)",
                c.len(),
                ratios.len()
            )));
        }
    }
    let fields = ExportFields::default();
    let exporter = Exporter {
        template: &base.template,
        roles: &base.roles,
        kind: ExportKind::Sft,
        fields: &fields,
    };
    let mut rows = Vec::with_capacity(ratios.len());
    for (i, spec) in ratios.iter().enumerate() {
        let pairs = generate_pairs(train_ds, spec);
        let stats = exporter
            .write(&pairs, io::sink())
            .expect("writing to a sink cannot fail");
        let report = match checkpoints {
            Some(c) => {
                let engine = Engine::new(c[i].clone(), base.clone()).map_err(|source| {
                    EvalError::Engine {
                        config: format!("ratio={}", spec.ratio),
                        source,
                    }
                })?;
                let mut r = evaluate(&engine, eval_ds, k_list, false).await?;
                r.config.ratio = Some(spec.ratio);
                Some(r)
            }
            None => None,
        };
        rows.push(SensitivityRow {
            ratio: spec.ratio,
            pairs: stats.lines,
            positives: stats.positives,
            negatives: stats.negatives,
            prompt_chars_total: stats.prompt_chars_total,
            prompt_chars_max: stats.prompt_chars_max,
            report,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Table,
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(Self::Table),
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            _ => Err(format!("unknown format `{s}`; expected table, json or csv")),
        }
    }
}

/// Column label for the reciprocal-rank metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MrrLabel {
    #[default]
    Mrr,
    PMrr,
}

impl MrrLabel {
    fn apply<'a>(&self, name: &'a str) -> &'a str {
        match (self, name) {
            (MrrLabel::PMrr, "mrr") => "p-MRR",
            _ => name,
        }
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Renders reports as an aligned table (percentages), JSON or CSV (fractions).
pub fn render_reports(reports: &[EvalReport], format: ReportFormat, label: MrrLabel) -> String {
    if format == ReportFormat::Json {
        let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
        if label == MrrLabel::PMrr {
            s = s.replace("\"name\": \"mrr\"", "\"name\": \"p-MRR\"");
        }
        s.push('\n');
        return s;
    }
    let metric_names: Vec<String> = reports
        .first()
        .map(|r| {
            r.metrics
                .iter()
                .map(|m| label.apply(&m.name).to_string())
                .collect()
        })
        .unwrap_or_default();
    let mut header: Vec<String> = ["I_bc", "D=>Q", "norm", "n"].map(String::from).to_vec();
    header.extend(metric_names);
    header.push("RT(ms)".into());
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![
                yes_no(r.config.choice_instruction).to_string(),
                yes_no(r.config.order == PromptOrder::DocFirst).to_string(),
                r.config.normalization.to_string(),
                r.n_queries.to_string(),
            ];
            for m in &r.metrics {
                row.push(match format {
                    ReportFormat::Csv => format!("{}", m.value),
                    _ => format!("{:.1}", m.percent),
                });
            }
            row.push(match format {
                ReportFormat::Csv => format!("{}", r.latency.mean_ms),
                _ => format!("{:.2}", r.latency.mean_ms),
            });
            row
        })
        .collect();
    format_rows(&header, &rows, format)
}

pub fn render_sensitivity(rows: &[SensitivityRow], format: ReportFormat) -> String {
    if format == ReportFormat::Json {
        let mut s = serde_json::to_string_pretty(rows).expect("rows serialize");
        s.push('\n');
        return s;
    }
    let mut header: Vec<String> = [
        "ratio",
        "pairs",
        "positives",
        "negatives",
        "prompt_chars",
        "max_prompt_chars",
    ]
    .map(String::from)
    .to_vec();
    let with_reports = rows.iter().any(|r| r.report.is_some());
    if with_reports {
        if let Some(r) = rows.iter().find_map(|r| r.report.as_ref()) {
            header.extend(r.metrics.iter().map(|m| m.name.clone()));
        }
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.ratio.to_string(),
                r.pairs.to_string(),
                r.positives.to_string(),
                r.negatives.to_string(),
                r.prompt_chars_total.to_string(),
                r.prompt_chars_max.to_string(),
            ];
            if let Some(rep) = &r.report {
                row.extend(rep.metrics.iter().map(|m| format!("{:.1}", m.percent)));
            }
            row
        })
        .collect();
    format_rows(&header, &body, format)
}

/// Right-aligned table or CSV. JSON callers serialize their own rows.
pub fn format_rows(header: &[String], rows: &[Vec<String>], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => csv(header, rows),
        _ => table(header, rows),
    }
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r.get(c).map_or(0, String::len))
                .chain(std::iter::once(header[c].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut out, &rule);
    for r in rows {
        line(&mut out, r);
    }
    out
}

fn csv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ScoredDocument, Timing};

    fn result(order: &[&str]) -> RetrievalResult {
        RetrievalResult {
            query_id: "q".into(),
            ranking: order
                .iter()
                .enumerate()
                .map(|(i, d)| ScoredDocument {
                    doc_id: d.to_string(),
                    s_true: -1.0,
                    s_false: -1.0,
                    s_rel: 0.5,
                    rank: i + 1,
                })
                .collect(),
            timing: Timing {
                total_ms: 1.0,
                wall_clock_ms: None,
                prompt_tokens: 0,
                cached_tokens: 0,
                per_document: vec![],
            },
            normalization: Normalization::ProbSoftmax,
        }
    }

    #[test]
    fn recall_examples() {
        let r = result(&["a", "g", "b"]);
        assert_eq!(recall_at_k(&r, &["g"], 1), Ok(0.0));
        assert_eq!(recall_at_k(&r, &["g"], 3), Ok(1.0));
        assert_eq!(
            recall_at_k(&r, &[], 3),
            Err(MetricError::NoGold("q".into()))
        );
        assert_eq!(recall_at_k(&r, &["g"], 0), Err(MetricError::InvalidK));
    }

    #[test]
    fn rr_examples() {
        assert_eq!(reciprocal_rank(&result(&["g", "a"]), &["g"]), Ok(1.0));
        assert_eq!(reciprocal_rank(&result(&["a", "g"]), &["g"]), Ok(0.5));
    }

    #[test]
    fn mrr_mean_of_three() {
        let qs: Vec<Query> = (0..3)
            .map(|i| Query::new(format!("q{i}"), "x").with_gold(["g"]))
            .collect();
        let rs = [
            result(&["g", "a", "b", "c"]),
            result(&["a", "g", "b", "c"]),
            result(&["a", "b", "c", "g"]),
        ];
        let pairs: Vec<_> = qs.iter().zip(rs.iter()).collect();
        let cfg = ReportConfig {
            choice_instruction: true,
            order: PromptOrder::DocFirst,
            normalization: Normalization::ProbSoftmax,
            backend: "test".into(),
            warm_cache: false,
            ratio: None,
        };
        let rep = aggregate(&pairs, &[1, 3], cfg).unwrap();
        assert!((rep.metric("mrr").unwrap() - (1.0 + 0.5 + 0.25) / 3.0).abs() < 1e-15);
        assert!((rep.metric("R@1").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((rep.metric("R@3").unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let names: Vec<_> = rep.metrics.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names, vec!["R@1", "R@3", "mrr"]);

        let table = render_reports(
            std::slice::from_ref(&rep),
            ReportFormat::Table,
            MrrLabel::PMrr,
        );
        assert!(table.contains("p-MRR") && table.contains("33.3"));
        let csv = render_reports(&[rep], ReportFormat::Csv, MrrLabel::Mrr);
        assert!(csv.starts_with("I_bc,D=>Q,norm,n,R@1,R@3,mrr,RT(ms)\n"));
    }

    #[test]
    fn queries_without_gold_are_excluded() {
        let q1 = Query::new("q1", "x").with_gold(["g"]);
        let q2 = Query::new("q2", "x");
        let r = result(&["g"]);
        let cfg = ReportConfig {
            choice_instruction: true,
            order: PromptOrder::DocFirst,
            normalization: Normalization::ProbSoftmax,
            backend: "test".into(),
            warm_cache: false,
            ratio: None,
        };
        let rep = aggregate(&[(&q1, &r), (&q2, &r)], &[1], cfg).unwrap();
        assert_eq!((rep.n_queries, rep.n_excluded), (1, 1));
        assert_eq!(rep.metric("R@1"), Some(1.0));
    }

    #[test]
    fn percentiles() {
        let s = LatencyStats::from_samples(&[4.0, 1.0, 3.0, 2.0], &[0, 2, 2, 0]);
        assert_eq!(
            (s.p50_ms, s.p90_ms, s.mean_ms, s.mean_cached_tokens),
            (2.0, 4.0, 2.5, 1.0)
        );
    }
}
