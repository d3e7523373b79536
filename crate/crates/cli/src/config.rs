//! Run configuration: an optional TOML file overlaid by command-line flags.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use sqlagents_core::backend::{
    BackendHandle, HttpBackend, HttpConfig, RetryPolicy, ScriptedBackend,
};
use sqlagents_core::pipeline::PipelineError;
use sqlagents_core::retrieval::PrecomputedRanker;
use sqlagents_core::rlef::{RlefConfig, RlefError};
use sqlagents_core::{Backends, Pipeline, PipelineConfig};

use crate::UsageError;

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const DEFAULT_API_KEY_ENV: &str = "SQLAGENTS_API_KEY";

/// Where one agent role gets its completions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Http {
        url: String,
        model: String,
        /// Name of the environment variable holding the bearer token.
        #[serde(default = "default_key_env")]
        api_key_env: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_secs: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_retries: Option<u32>,
        #[serde(default)]
        logprobs: bool,
    },
    Scripted {
        fixture: PathBuf,
    },
}

fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

/// Per-role backends. A role without its own entry uses `default`;
/// `advanced` has no fallback.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub default: Option<BackendSpec>,
    pub planner: Option<BackendSpec>,
    pub validator: Option<BackendSpec>,
    pub fix: Option<BackendSpec>,
    pub selection: Option<BackendSpec>,
    pub advanced: Option<BackendSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub db_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Free-form label recorded with the outputs.
    pub seed: Option<String>,
    /// Precomputed schema-element scores replacing the lexical ranker.
    pub ranker_scores: Option<PathBuf>,
    pub pipeline: PipelineConfig,
    pub rlef: RlefConfig,
    pub backends: BackendsConfig,
}

/// Flags shared by `run` and `build-rlef`.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset JSON (Spider or BIRD layout).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Directory holding `<db_id>/<db_id>.sqlite`.
    #[arg(long)]
    pub db_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long = "out")]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub ranker_scores: Option<PathBuf>,
    /// Candidates per question (K).
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Sampling temperature (T).
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Matched values kept per column.
    #[arg(long)]
    pub top_k_values: Option<usize>,
    /// Candidates shown per selection call.
    #[arg(long)]
    pub subset_size: Option<usize>,
    #[arg(long)]
    pub max_tables: Option<usize>,
    #[arg(long)]
    pub max_columns: Option<usize>,
    /// Per-query execution timeout in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Scripted fixture used for every role.
    #[arg(long, conflicts_with = "endpoint")]
    pub scripted: Option<PathBuf>,
    /// Completion endpoint used for every role.
    #[arg(long, requires = "model")]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Completion endpoint for the advanced (assistant) role.
    #[arg(
        long,
        requires = "advanced_model",
        conflicts_with = "advanced_scripted"
    )]
    pub advanced_endpoint: Option<String>,
    #[arg(long)]
    pub advanced_model: Option<String>,
    #[arg(long)]
    pub advanced_scripted: Option<PathBuf>,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
    }

    /// File values (when given) overlaid by flags.
    pub fn resolve(args: &CommonArgs) -> anyhow::Result<Self> {
        let mut c = match &args.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(c.dataset, args.dataset.clone().map(Some));
        set!(c.db_root, args.db_root.clone().map(Some));
        set!(c.output_dir, args.output_dir.clone().map(Some));
        set!(c.seed, args.seed.clone().map(Some));
        set!(c.ranker_scores, args.ranker_scores.clone().map(Some));
        set!(c.pipeline.candidates, args.candidates);
        set!(c.pipeline.temperature, args.temperature);
        set!(c.pipeline.top_k_values, args.top_k_values);
        set!(c.pipeline.subset_size, args.subset_size);
        set!(c.pipeline.budget.max_tables, args.max_tables);
        set!(c.pipeline.budget.max_columns_per_table, args.max_columns);
        set!(c.pipeline.timeout_secs, args.timeout);
        set!(c.pipeline.parallelism, args.parallelism);
        c.rlef.temperature = c.pipeline.temperature;
        c.rlef.timeout_secs = c.pipeline.timeout_secs;
        if let Some(f) = &args.scripted {
            c.backends.default = Some(BackendSpec::Scripted { fixture: f.clone() });
        }
        if let (Some(url), Some(model)) = (&args.endpoint, &args.model) {
            c.backends.default = Some(http_spec(url, model));
        }
        if let Some(f) = &args.advanced_scripted {
            c.backends.advanced = Some(BackendSpec::Scripted { fixture: f.clone() });
        }
        if let (Some(url), Some(model)) = (&args.advanced_endpoint, &args.advanced_model) {
            c.backends.advanced = Some(http_spec(url, model));
        }
        Ok(c)
    }

    /// Checks everything a pipeline run needs, naming the offending field.
    pub fn validate(&self) -> anyhow::Result<()> {
        let dataset = self
            .dataset
            .as_ref()
            .ok_or_else(|| usage("dataset: required"))?;
        if !dataset.is_file() {
            return Err(usage(format!(
                "dataset: {} is not a file",
                dataset.display()
            )));
        }
        let db_root = self
            .db_root
            .as_ref()
            .ok_or_else(|| usage("db_root: required"))?;
        if !db_root.is_dir() {
            return Err(usage(format!(
                "db_root: {} is not a directory",
                db_root.display()
            )));
        }
        if self.output_dir.is_none() {
            return Err(usage("output_dir: required"));
        }
        if let Err(PipelineError::Config(msg)) = self.pipeline.validate() {
            return Err(usage(format!("pipeline.{msg}")));
        }
        if let Err(RlefError::Config(msg)) = self.rlef.validate() {
            return Err(usage(format!("rlef: {msg}")));
        }
        for (role, spec) in self.roles() {
            match spec {
                None => return Err(usage(format!("backends.{role}: no backend configured"))),
                Some(BackendSpec::Scripted { fixture }) if !fixture.is_file() => {
                    return Err(usage(format!(
                        "backends.{role}: fixture {} not found",
                        fixture.display()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn roles(&self) -> [(&'static str, Option<&BackendSpec>); 4] {
        let b = &self.backends;
        let d = b.default.as_ref();
        [
            ("planner", b.planner.as_ref().or(d)),
            ("validator", b.validator.as_ref().or(d)),
            ("fix", b.fix.as_ref().or(d)),
            ("selection", b.selection.as_ref().or(d)),
        ]
    }

    pub fn dataset_path(&self) -> &Path {
        self.dataset.as_deref().expect("validated")
    }

    pub fn output_path(&self) -> &Path {
        self.output_dir.as_deref().expect("validated")
    }

    /// Instantiates one handle per role. Roles naming the same fixture file
    /// share one scripted backend, so its queues are consumed once.
    pub fn backends(&self) -> anyhow::Result<Backends> {
        let mut scripted: HashMap<PathBuf, BackendHandle> = HashMap::new();
        let mut build = |spec: &BackendSpec| -> anyhow::Result<BackendHandle> {
            Ok(match spec {
                BackendSpec::Scripted { fixture } => {
                    if let Some(h) = scripted.get(fixture) {
                        return Ok(h.clone());
                    }
                    let h: BackendHandle = Arc::new(
                        ScriptedBackend::from_file(fixture)
                            .with_context(|| format!("loading fixture {}", fixture.display()))?,
                    );
                    scripted.insert(fixture.clone(), h.clone());
                    h
                }
                BackendSpec::Http {
                    url,
                    model,
                    api_key_env,
                    timeout_secs,
                    max_retries,
                    logprobs,
                } => {
                    let mut cfg = HttpConfig::new(url.clone(), model.clone());
                    cfg.api_key = std::env::var(api_key_env).ok();
                    if let Some(t) = timeout_secs {
                        cfg.timeout_secs = *t;
                    }
                    if let Some(r) = max_retries {
                        cfg.retry = RetryPolicy {
                            max_retries: *r,
                            ..cfg.retry
                        };
                    }
                    cfg.logprobs = *logprobs;
                    Arc::new(HttpBackend::new(cfg))
                }
            })
        };
        let [planner, validator, fix, selection] = self.roles().map(|(role, spec)| {
            spec.ok_or_else(|| usage(format!("backends.{role}: no backend configured")))
        });
        Ok(Backends {
            planner: build(planner?)?,
            validator: build(validator?)?,
            fix: build(fix?)?,
            selection: build(selection?)?,
            advanced: self
                .backends
                .advanced
                .as_ref()
                .map(&mut build)
                .transpose()?,
        })
    }

    pub fn pipeline(&self) -> anyhow::Result<Pipeline> {
        let db_root = self.db_root.clone().expect("validated");
        let mut p = Pipeline::new(self.pipeline.clone(), self.backends()?, db_root);
        if let Some(path) = &self.ranker_scores {
            let ranker = PrecomputedRanker::from_file(path)
                .with_context(|| format!("loading ranker scores {}", path.display()))?;
            p = p.with_ranker(Arc::new(ranker));
        }
        Ok(p)
    }

    /// Writes the effective configuration to `<dir>/config.json`. Secrets
    /// never appear: HTTP backends record only the variable name.
    pub fn snapshot(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(CONFIG_SNAPSHOT);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn http_spec(url: &str, model: &str) -> BackendSpec {
    BackendSpec::Http {
        url: url.to_string(),
        model: model.to_string(),
        api_key_env: default_key_env(),
        timeout_secs: None,
        max_retries: None,
        logprobs: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_with_role_overrides() {
        let text = r#"
            dataset = "dev.json"
            db_root = "dbs"
            output_dir = "out"

            [pipeline]
            candidates = 4

            [backends.default]
            kind = "http"
            url = "http://localhost:8000/v1/completions"
            model = "planner-1b"

            [backends.selection]
            kind = "scripted"
            fixture = "sel.json"
        "#;
        let c: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(c.pipeline.candidates, 4);
        assert_eq!(c.pipeline.temperature, 1.0);
        let roles = c.roles();
        assert!(
            matches!(roles[0].1, Some(BackendSpec::Http { api_key_env, .. }) if api_key_env == DEFAULT_API_KEY_ENV)
        );
        assert!(matches!(roles[3].1, Some(BackendSpec::Scripted { .. })));
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("datset = \"x\"").is_err());
    }

    #[test]
    fn flags_override_file() {
        let args = CommonArgs {
            candidates: Some(3),
            temperature: Some(0.7),
            scripted: Some("f.json".into()),
            ..Default::default()
        };
        let c = RunConfig::resolve(&args).unwrap();
        assert_eq!(c.pipeline.candidates, 3);
        assert_eq!(c.rlef.temperature, 0.7);
        assert_eq!(
            c.backends.default,
            Some(BackendSpec::Scripted {
                fixture: "f.json".into()
            })
        );
    }

    #[test]
    fn validation_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = dir.path().join("d.json");
        std::fs::write(&dataset, "[]").unwrap();
        let mut c = RunConfig {
            dataset: Some(dataset),
            output_dir: Some(dir.path().join("out")),
            ..Default::default()
        };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.starts_with("db_root"), "{err}");
        c.db_root = Some(dir.path().join("missing"));
        assert!(c.validate().unwrap_err().to_string().starts_with("db_root"));
        c.db_root = Some(dir.path().to_path_buf());
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .starts_with("backends.planner"));
        c.backends.default = Some(BackendSpec::Scripted {
            fixture: dir.path().join("d.json"),
        });
        c.pipeline.candidates = 0;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .starts_with("pipeline.candidates"));
    }
}
