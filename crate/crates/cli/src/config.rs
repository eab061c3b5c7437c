//! Application configuration.
//!
//! Sources, lowest to highest precedence: built-in defaults, the TOML file
//! (`--config` or `RAHORE_CONFIG`), `RAHORE_*` environment variables, then
//! command-line flags.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use rahore_core::backend::{BackendConfig, BackendKind};
use rahore_core::datasets::ExportFields;
use rahore_core::engine::{EngineConfig, SchedulingPolicy};
use rahore_core::prompt::{PromptOrder, PromptTemplate, RoleLabels};
use rahore_core::scoring::Normalization;
use serde::de::{DeserializeOwned, IntoDeserializer};
use serde::{Deserialize, Serialize};

pub const ENV_CONFIG: &str = "RAHORE_CONFIG";

/// Environment variables read by [`Overrides::from_env`], with the config
/// field each one sets.
pub const ENV_VARS: [(&str, &str); 11] = [
    ("RAHORE_BACKEND_KIND", "backend.kind"),
    ("RAHORE_BACKEND_URL", "backend.endpoint_url"),
    ("RAHORE_MODEL", "backend.model"),
    ("RAHORE_API_KEY_ENV", "backend.api_key_env"),
    ("RAHORE_CORPUS", "paths.corpus"),
    ("RAHORE_QUERIES", "paths.queries"),
    ("RAHORE_K", "default_k"),
    ("RAHORE_NORMALIZATION", "normalization"),
    ("RAHORE_ORDER", "template.order"),
    ("RAHORE_BIND", "service.bind"),
    ("RAHORE_SEED", "seed"),
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {}: {error}", path.display())]
    Io {
        path: PathBuf,
        error: std::io::Error,
    },
    #[error("invalid configuration:\n{}", render_issues(.0))]
    Invalid(Vec<ConfigIssue>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    /// Dotted path into the config document, or the variable/flag name.
    pub path: String,
    pub message: String,
}

fn render_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  {}: {}", i.path, i.message))
        .collect::<Vec<_>>()
        .join("\n")
}

fn issue(path: impl Into<String>, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Prime the prefix cache before accepting retrievals.
    pub warm_on_start: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            warm_on_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub k: Vec<usize>,
    /// Label the reciprocal-rank column `p-MRR` instead of `mrr`.
    pub p_mrr_label: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            k: vec![1, 3],
            p_mrr_label: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub backend: BackendConfig,
    pub template: PromptTemplate,
    pub roles: RoleLabels,
    pub normalization: Normalization,
    pub scheduling: SchedulingPolicy,
    pub cache_ttl_secs: Option<f64>,
    pub default_k: usize,
    /// Seed for negative sampling and splits.
    pub seed: u64,
    pub paths: Paths,
    pub service: ServiceConfig,
    pub eval: EvalSettings,
    pub export: ExportFields,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::default(),
            template: PromptTemplate::default(),
            roles: RoleLabels::default(),
            normalization: Normalization::default(),
            scheduling: SchedulingPolicy::default(),
            cache_ttl_secs: None,
            default_k: 3,
            seed: 0,
            paths: Paths::default(),
            service: ServiceConfig::default(),
            eval: EvalSettings::default(),
            export: ExportFields::default(),
        }
    }
}

impl AppConfig {
    /// Parses a TOML document without validating field values.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| ConfigError::Invalid(vec![issue("<document>", e.message())]))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::Invalid(vec![issue(path, e.inner().message())])
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|error| ConfigError::Io {
            path: path.to_path_buf(),
            error,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues: Vec<ConfigIssue> = self
            .backend
            .validate()
            .into_iter()
            .map(|(field, msg)| issue(format!("backend.{field}"), msg))
            .collect();
        if let Err(e) = self.template.validate() {
            issues.push(issue("template", e.to_string()));
        }
        if self.default_k < 1 {
            issues.push(issue("default_k", "must be >= 1"));
        }
        if self.eval.k.is_empty() || self.eval.k.contains(&0) {
            issues.push(issue("eval.k", "must be a non-empty list of values >= 1"));
        }
        if self.cache_ttl_secs.is_some_and(|t| t.is_nan() || t < 0.0) {
            issues.push(issue("cache_ttl_secs", "must be >= 0"));
        }
        if self.service.bind.parse::<SocketAddr>().is_err() {
            issues.push(issue(
                "service.bind",
                "must be an address like 127.0.0.1:8080",
            ));
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            template: self.template.clone(),
            roles: self.roles.clone(),
            normalization: self.normalization,
            scheduling: self.scheduling,
            cache_ttl_secs: self.cache_ttl_secs,
        }
    }
}

/// Values that can come from environment variables or flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub backend_kind: Option<BackendKind>,
    pub backend_url: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub default_k: Option<usize>,
    pub normalization: Option<Normalization>,
    pub order: Option<PromptOrder>,
    pub bind: Option<String>,
    pub seed: Option<u64>,
}

/// Parses a snake_case enum name the same way the config file does.
pub fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    let de: serde::de::value::StrDeserializer<'_, serde::de::value::Error> = s.into_deserializer();
    T::deserialize(de).map_err(|e| e.to_string())
}

impl Overrides {
    pub fn from_env(get: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let mut issues = Vec::new();
        let mut o = Overrides::default();
        let var = |name: &str| get(name).filter(|v| !v.is_empty());
        fn parsed<T>(
            issues: &mut Vec<ConfigIssue>,
            name: &str,
            v: Option<String>,
            f: impl Fn(&str) -> Result<T, String>,
        ) -> Option<T> {
            let v = v?;
            match f(&v) {
                Ok(t) => Some(t),
                Err(e) => {
                    issues.push(issue(name, format!("`{v}`: {e}")));
                    None
                }
            }
        }
        let num = |s: &str| s.parse::<u64>().map_err(|e| e.to_string());
        o.backend_kind = parsed(
            &mut issues,
            "RAHORE_BACKEND_KIND",
            var("RAHORE_BACKEND_KIND"),
            parse_enum,
        );
        o.backend_url = var("RAHORE_BACKEND_URL");
        o.model = var("RAHORE_MODEL");
        o.api_key_env = var("RAHORE_API_KEY_ENV");
        o.corpus = var("RAHORE_CORPUS").map(PathBuf::from);
        o.queries = var("RAHORE_QUERIES").map(PathBuf::from);
        o.default_k = parsed(&mut issues, "RAHORE_K", var("RAHORE_K"), |s| {
            s.parse::<usize>().map_err(|e| e.to_string())
        });
        o.normalization = parsed(
            &mut issues,
            "RAHORE_NORMALIZATION",
            var("RAHORE_NORMALIZATION"),
            parse_enum,
        );
        o.order = parsed(&mut issues, "RAHORE_ORDER", var("RAHORE_ORDER"), parse_enum);
        o.bind = var("RAHORE_BIND");
        o.seed = parsed(&mut issues, "RAHORE_SEED", var("RAHORE_SEED"), num);
        if issues.is_empty() {
            Ok(o)
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    pub fn apply(&self, cfg: &mut AppConfig) {
        if let Some(v) = self.backend_kind {
            cfg.backend.kind = v;
        }
        if let Some(v) = &self.backend_url {
            cfg.backend.endpoint_url = Some(v.clone());
        }
        if let Some(v) = &self.model {
            cfg.backend.model = v.clone();
        }
        if let Some(v) = &self.api_key_env {
            cfg.backend.api_key_env = Some(v.clone());
        }
        if let Some(v) = &self.corpus {
            cfg.paths.corpus = Some(v.clone());
        }
        if let Some(v) = &self.queries {
            cfg.paths.queries = Some(v.clone());
        }
        if let Some(v) = self.default_k {
            cfg.default_k = v;
        }
        if let Some(v) = self.normalization {
            cfg.normalization = v;
        }
        if let Some(v) = self.order {
            cfg.template.order = v;
        }
        if let Some(v) = &self.bind {
            cfg.service.bind = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
    }
}

/// Resolves the final configuration: file, then environment, then flags.
/// `config_flag` beats `RAHORE_CONFIG` for the file location.
pub fn load(
    config_flag: Option<&Path>,
    env: impl Fn(&str) -> Option<String>,
    flags: &Overrides,
) -> Result<AppConfig, ConfigError> {
    let path = config_flag
        .map(Path::to_path_buf)
        .or_else(|| env(ENV_CONFIG).filter(|v| !v.is_empty()).map(PathBuf::from));
    let mut cfg = match &path {
        Some(p) => AppConfig::from_file(p)?,
        None => AppConfig::default(),
    };
    Overrides::from_env(&env)?.apply(&mut cfg);
    flags.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn env(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let m: HashMap<String, String> = pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        move |k| m.get(k).cloned()
    }

    fn file_with(body: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rahore.toml");
        fs::write(&p, body).unwrap();
        (dir, p)
    }

    #[test]
    fn defaults_validate() {
        AppConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_field_reports_path() {
        let err =
            AppConfig::from_toml("[backend]\nmax_concurrent_requests = \"many\"\n").unwrap_err();
        assert!(
            err.to_string().contains("backend.max_concurrent_requests"),
            "{err}"
        );
        let err = AppConfig::from_toml("[template]\nordr = \"doc_first\"\n").unwrap_err();
        assert!(err.to_string().contains("ordr"), "{err}");
        let cfg = AppConfig::from_toml("[backend]\nmax_concurrent_requests = 0\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(
            err.to_string()
                .contains("backend.max_concurrent_requests: must be >= 1"),
            "{err}"
        );
    }

    #[test]
    fn config_path_flag_beats_env() {
        let (_d1, a) = file_with("default_k = 4\n");
        let (_d2, b) = file_with("default_k = 6\n");
        let e = env(&[(ENV_CONFIG, b.to_str().unwrap())]);
        assert_eq!(
            load(Some(&a), &e, &Overrides::default()).unwrap().default_k,
            4
        );
        assert_eq!(load(None, &e, &Overrides::default()).unwrap().default_k, 6);
    }

    /// For each overridable field: file value, then env beats file, then flag
    /// beats env.
    #[test]
    fn precedence_per_field() {
        let (_d, path) = file_with(
            r#"
default_k = 2
seed = 1
normalization = "prob_softmax"
[backend]
kind = "mock"
endpoint_url = "http://file:1"
model = "file-model"
api_key_env = "FILE_KEY"
[template]
order = "doc_first"
[paths]
corpus = "file-corpus.jsonl"
queries = "file-queries.jsonl"
[service]
bind = "127.0.0.1:1000"
"#,
        );
        let env_vals: [(&str, &str); 11] = [
            ("RAHORE_BACKEND_KIND", "oracle_mock"),
            ("RAHORE_BACKEND_URL", "http://env:2"),
            ("RAHORE_MODEL", "env-model"),
            ("RAHORE_API_KEY_ENV", "ENV_KEY"),
            ("RAHORE_CORPUS", "env-corpus.jsonl"),
            ("RAHORE_QUERIES", "env-queries.jsonl"),
            ("RAHORE_K", "5"),
            ("RAHORE_NORMALIZATION", "literal_log_ratio"),
            ("RAHORE_ORDER", "query_first"),
            ("RAHORE_BIND", "127.0.0.1:2000"),
            ("RAHORE_SEED", "7"),
        ];
        let flags = Overrides {
            backend_kind: Some(BackendKind::HttpCompletions),
            backend_url: Some("http://flag:3".into()),
            model: Some("flag-model".into()),
            api_key_env: Some("FLAG_KEY".into()),
            corpus: Some("flag-corpus.jsonl".into()),
            queries: Some("flag-queries.jsonl".into()),
            default_k: Some(9),
            normalization: Some(Normalization::ProbSoftmax),
            order: Some(PromptOrder::DocFirst),
            bind: Some("127.0.0.1:3000".into()),
            seed: Some(11),
        };
        type Get = fn(&AppConfig) -> String;
        let getters: [(&str, Get); 11] = [
            ("RAHORE_BACKEND_KIND", |c| format!("{:?}", c.backend.kind)),
            ("RAHORE_BACKEND_URL", |c| {
                c.backend.endpoint_url.clone().unwrap()
            }),
            ("RAHORE_MODEL", |c| c.backend.model.clone()),
            ("RAHORE_API_KEY_ENV", |c| {
                c.backend.api_key_env.clone().unwrap()
            }),
            ("RAHORE_CORPUS", |c| {
                c.paths.corpus.clone().unwrap().display().to_string()
            }),
            ("RAHORE_QUERIES", |c| {
                c.paths.queries.clone().unwrap().display().to_string()
            }),
            ("RAHORE_K", |c| c.default_k.to_string()),
            ("RAHORE_NORMALIZATION", |c| c.normalization.to_string()),
            ("RAHORE_ORDER", |c| c.template.order.to_string()),
            ("RAHORE_BIND", |c| c.service.bind.clone()),
            ("RAHORE_SEED", |c| c.seed.to_string()),
        ];
        assert_eq!(ENV_VARS.map(|(k, _)| k), getters.map(|(k, _)| k));

        let file_only = load(Some(&path), env(&[]), &Overrides::default()).unwrap();
        let env_all = load(Some(&path), env(&env_vals), &Overrides::default()).unwrap();
        let flag_all = load(Some(&path), env(&env_vals), &flags).unwrap();
        for (i, (var, get)) in getters.iter().enumerate() {
            let from_file = get(&file_only);
            // Only this one variable set.
            let single = load(Some(&path), env(&env_vals[i..=i]), &Overrides::default()).unwrap();
            assert_ne!(get(&single), from_file, "{var} did not override the file");
            assert_eq!(get(&single), get(&env_all), "{var}");
            assert_ne!(get(&flag_all), get(&env_all), "flag did not beat {var}");
        }
    }

    #[test]
    fn bad_env_value_names_variable() {
        let err = Overrides::from_env(env(&[("RAHORE_K", "three")])).unwrap_err();
        assert!(err.to_string().contains("RAHORE_K"), "{err}");
        let err = Overrides::from_env(env(&[("RAHORE_BACKEND_KIND", "gpt")])).unwrap_err();
        assert!(err.to_string().contains("RAHORE_BACKEND_KIND"), "{err}");
    }

    #[test]
    fn missing_config_file_names_path() {
        let err = load(
            Some(Path::new("/no/such/rahore.toml")),
            env(&[]),
            &Overrides::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("/no/such/rahore.toml"));
    }
}
