//! Command-line interface.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rahore_core::backend::BackendKind;
use rahore_core::datasets::{generate_pairs, ExportKind, Exporter, PairSpec, Ratio};
use rahore_core::engine::RetrievalResult;
use rahore_core::eval::{
    ablation_grid, evaluate, format_rows, render_reports, render_sensitivity, sensitivity_sweep,
    EvalReport, MrrLabel, ReportFormat,
};
use rahore_core::prompt::{PromptOrder, Query};
use rahore_core::scoring::Normalization;

use crate::app::App;
use crate::config::{self, parse_enum, AppConfig, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "rahore",
    version,
    about = "Generative binary-choice retrieval with prefix-cache-aware scoring"
)]
pub struct Cli {
    /// TOML config file (default: $RAHORE_CONFIG).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: OverrideArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override the config file and environment.
#[derive(Debug, Default, Args)]
pub struct OverrideArgs {
    /// mock, oracle_mock or http_completions.
    #[arg(long, global = true, value_parser = parse_enum::<BackendKind>)]
    pub backend: Option<BackendKind>,
    #[arg(long, global = true, value_name = "URL")]
    pub backend_url: Option<String>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[arg(long, global = true, value_name = "VAR")]
    pub api_key_env: Option<String>,
    #[arg(long, global = true, value_name = "PATH")]
    pub corpus: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub queries: Option<PathBuf>,
    /// prob_softmax or literal_log_ratio.
    #[arg(long, global = true, value_parser = parse_enum::<Normalization>)]
    pub normalization: Option<Normalization>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Clone, Copy, Args)]
pub struct TemplateArgs {
    /// Drop the choice-instruction line.
    #[arg(long)]
    pub no_ibc: bool,
    /// Put the query before the document.
    #[arg(long)]
    pub query_first: bool,
}

impl TemplateArgs {
    fn apply(&self, cfg: &mut AppConfig) {
        if self.no_ibc {
            cfg.template.choice_instruction = None;
        }
        if self.query_first {
            cfg.template.order = PromptOrder::QueryFirst;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Table,
    Json,
    Csv,
}

impl From<TableFormat> for ReportFormat {
    fn from(f: TableFormat) -> Self {
        match f {
            TableFormat::Table => ReportFormat::Table,
            TableFormat::Json => ReportFormat::Json,
            TableFormat::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rank the corpus for one query or a queries file.
    Retrieve {
        /// Dialogue text, e.g. "user: I lost my job". Without it, the
        /// configured queries file is used.
        #[arg(long)]
        query: Option<String>,
        #[arg(long, default_value = "query")]
        query_id: String,
        /// Gold document ids for --query (used by the oracle backend).
        #[arg(long, value_delimiter = ',')]
        gold: Vec<String>,
        #[arg(short)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value = "json")]
        format: OutputFormat,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[command(flatten)]
        template: TemplateArgs,
    },
    /// Recall@k and MRR over the queries file.
    Eval {
        #[arg(short, value_delimiter = ',')]
        k: Vec<usize>,
        /// Run all four choice-instruction × order configurations.
        #[arg(long)]
        ablate: bool,
        /// Prime the prefix cache before retrieval (document-first only).
        #[arg(long)]
        warm: bool,
        /// Label the reciprocal-rank column p-MRR.
        #[arg(long)]
        p_mrr: bool,
        #[arg(long, value_enum, default_value = "table")]
        format: TableFormat,
        #[command(flatten)]
        template: TemplateArgs,
    },
    /// Write SFT or DPO training pairs.
    Export {
        #[arg(long, value_parser = |s: &str| s.parse::<ExportKind>())]
        kind: ExportKind,
        /// all, 1, 3, 5 or any 1:n.
        #[arg(long, default_value = "all", value_parser = |s: &str| s.parse::<Ratio>())]
        ratio: Ratio,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Pair counts and export sizes across positive:negative ratios.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "all,1,3,5", value_parser = |s: &str| s.parse::<Ratio>())]
        ratios: Vec<Ratio>,
        #[arg(long, value_enum, default_value = "table")]
        format: TableFormat,
    },
    /// Prime the backend's prefix cache with every document segment.
    Warm,
    /// Latency of the four prompt configurations over the queries file.
    Bench {
        #[arg(long, value_enum, default_value = "table")]
        format: TableFormat,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, value_name = "ADDR")]
        bind: Option<String>,
    },
}

impl OverrideArgs {
    fn to_overrides(&self, bind: Option<String>) -> Overrides {
        Overrides {
            backend_kind: self.backend,
            backend_url: self.backend_url.clone(),
            model: self.model.clone(),
            api_key_env: self.api_key_env.clone(),
            corpus: self.corpus.clone(),
            queries: self.queries.clone(),
            default_k: None,
            normalization: self.normalization,
            order: None,
            bind,
            seed: self.seed,
        }
    }
}

/// Exit codes.
pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;

/// Runs `cli`, writing results to `out` and diagnostics to stderr.
pub async fn run(
    cli: Cli,
    env: impl Fn(&str) -> Option<String>,
    out: &mut dyn Write,
) -> anyhow::Result<u8> {
    let bind = match &cli.command {
        Command::Serve { bind } => bind.clone(),
        _ => None,
    };
    let mut cfg = config::load(
        cli.config.as_deref(),
        env,
        &cli.overrides.to_overrides(bind),
    )?;
    match cli.command {
        Command::Retrieve {
            query,
            query_id,
            gold,
            k,
            format,
            out: path,
            template,
        } => {
            template.apply(&mut cfg);
            let k = k.unwrap_or(cfg.default_k);
            if k == 0 {
                bail!("k must be >= 1");
            }
            let app = App::from_config(cfg)?;
            let queries = match query {
                Some(text) => {
                    vec![Query::from_flattened(query_id, &text, &app.config().roles).with_gold(gold)]
                }
                None => app.load_queries(None)?,
            };
            let results = app.retrieve_many(&queries, k).await?;
            let mut buf = String::new();
            let mut failed = 0;
            for r in results {
                match r {
                    Ok(r) => render_result(&mut buf, &r, format, &app),
                    Err(e) => {
                        failed += 1;
                        eprintln!("error: {e}");
                    }
                }
            }
            emit(out, path.as_ref(), &buf)?;
            Ok(if failed > 0 { EXIT_PARTIAL } else { EXIT_OK })
        }
        Command::Eval {
            k,
            ablate,
            warm,
            p_mrr,
            format,
            template,
        } => {
            template.apply(&mut cfg);
            let k_list = if k.is_empty() { cfg.eval.k.clone() } else { k };
            if k_list.contains(&0) {
                bail!("k must be >= 1");
            }
            let label = if p_mrr || cfg.eval.p_mrr_label {
                MrrLabel::PMrr
            } else {
                MrrLabel::Mrr
            };
            let app = App::from_config(cfg)?;
            let ds = app.dataset(None)?;
            let reports: Vec<EvalReport> = if ablate {
                ablation_grid(
                    &ds,
                    app.backend().clone(),
                    &app.config().engine_config(),
                    &k_list,
                )
                .await?
            } else {
                vec![evaluate(app.engine(), &ds, &k_list, warm).await?]
            };
            if let Some(r) = reports.first() {
                if r.n_excluded > 0 {
                    eprintln!("note: {} query(ies) without gold excluded", r.n_excluded);
                }
            }
            out.write_all(render_reports(&reports, format.into(), label).as_bytes())?;
            Ok(EXIT_OK)
        }
        Command::Export {
            kind,
            ratio,
            out: path,
        } => {
            let app = App::from_config(cfg)?;
            let ds = app.dataset(None)?;
            let cfg = app.config();
            let pairs = generate_pairs(&ds, &PairSpec::new(ratio, cfg.seed));
            let exporter = Exporter {
                template: &cfg.template,
                roles: &cfg.roles,
                kind,
                fields: &cfg.export,
            };
            let stats = exporter
                .write_to_path(&pairs, &path)
                .with_context(|| format!("writing {}", path.display()))?;
            writeln!(
                out,
                "wrote {} line(s) ({} positive, {} negative) to {}",
                stats.lines,
                stats.positives,
                stats.negatives,
                path.display()
            )?;
            Ok(EXIT_OK)
        }
        Command::Sweep { ratios, format } => {
            let app = App::from_config(cfg)?;
            let ds = app.dataset(None)?;
            let seed = app.config().seed;
            let specs: Vec<PairSpec> = ratios.iter().map(|r| PairSpec::new(*r, seed)).collect();
            let rows =
                sensitivity_sweep(&ds, &ds, &app.config().engine_config(), &specs, None, &[1])
                    .await?;
            out.write_all(render_sensitivity(&rows, format.into()).as_bytes())?;
            Ok(EXIT_OK)
        }
        Command::Warm => {
            let app = App::from_config(cfg)?;
            let summary = app.warm().await?;
            writeln!(out, "{}", serde_json::to_string(&summary)?)?;
            Ok(EXIT_OK)
        }
        Command::Bench { format } => {
            let app = App::from_config(cfg)?;
            let ds = app.dataset(None)?;
            let reports = ablation_grid(
                &ds,
                app.backend().clone(),
                &app.config().engine_config(),
                &[1],
            )
            .await?;
            out.write_all(render_latency(&reports, format.into()).as_bytes())?;
            Ok(EXIT_OK)
        }
        Command::Serve { .. } => {
            let bind = cfg.service.bind.clone();
            let app = Arc::new(App::from_config(cfg)?);
            let listener = tokio::net::TcpListener::bind(&bind)
                .await
                .with_context(|| format!("binding {bind}"))?;
            crate::service::serve(app, listener).await?;
            Ok(EXIT_OK)
        }
    }
}

fn emit(out: &mut dyn Write, path: Option<&PathBuf>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => Ok(out.write_all(text.as_bytes())?),
    }
}

fn render_result(buf: &mut String, r: &RetrievalResult, format: OutputFormat, app: &App) {
    match format {
        OutputFormat::Json => {
            buf.push_str(&serde_json::to_string(r).expect("results serialize"));
            buf.push('\n');
        }
        OutputFormat::Table => {
            let _ = writeln!(
                buf,
                "{}  ({:.2} ms, {}/{} prompt tokens cached)",
                r.query_id, r.timing.total_ms, r.timing.cached_tokens, r.timing.prompt_tokens
            );
            let corpus = app.corpus();
            for d in &r.ranking {
                let text = corpus.get(&d.doc_id).map_or("", |d| d.text.as_str());
                let _ = writeln!(buf, "{:>4}  {:.6}  {}  {}", d.rank, d.s_rel, d.doc_id, text);
            }
        }
    }
}

/// RT table for `bench`.
fn render_latency(reports: &[EvalReport], format: ReportFormat) -> String {
    if format == ReportFormat::Json {
        let rows: Vec<_> = reports
            .iter()
            .map(|r| serde_json::json!({ "config": r.config, "latency": r.latency }))
            .collect();
        return serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n";
    }
    let header: Vec<String> = [
        "I_bc",
        "D=>Q",
        "mean_ms",
        "p50_ms",
        "p90_ms",
        "p99_ms",
        "cached_tokens",
    ]
    .map(String::from)
    .to_vec();
    let yes_no = |b: bool| if b { "yes" } else { "no" }.to_string();
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let l = &r.latency;
            vec![
                yes_no(r.config.choice_instruction),
                yes_no(r.config.order == PromptOrder::DocFirst),
                format!("{:.3}", l.mean_ms),
                format!("{:.3}", l.p50_ms),
                format!("{:.3}", l.p90_ms),
                format!("{:.3}", l.p99_ms),
                format!("{:.1}", l.mean_cached_tokens),
            ]
        })
        .collect();
    format_rows(&header, &rows, format)
}
