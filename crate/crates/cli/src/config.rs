//! Run configuration: a TOML file, environment overrides, and secrets from
//! the environment only.
//!
//! Environment keys (all optional):
//!
//! | variable | field |
//! |---|---|
//! | `RNR_K` | `k` |
//! | `RNR_K_INNER` | `k_inner` |
//! | `RNR_FUSION` | `fusion` |
//! | `RNR_PARALLELISM` | `parallelism` |
//! | `RNR_SEED` | `seed` |
//! | `RNR_BUDGET` | `budget` |
//! | `RNR_TEMPERATURE` | `temperature` |
//! | `RNR_MAX_REWRITES` | `max_rewrites` |
//! | `RNR_CACHE_DIR` | `cache_dir` |
//! | `RNR_RUNS_DIR` | `runs_dir` |
//! | `RNR_<ROLE>_KIND`, `_MODEL`, `_BASE_URL`, `_BEHAVIOR` | `[<role>]` fields |
//! | `RNR_<ROLE>_API_KEY`, else `OPENAI_API_KEY` | API token |
//!
//! Exam extraction profiles are tables `[exam_profiles.<name>]` with the
//! regexes `item_start`, `option`, `answer` and `explanation`.
//!
//! `<ROLE>` is one of `EMBEDDER`, `REWRITER`, `READER`, `ANNOTATOR`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rnr_core::ingest::{ExamPatterns, ExamProfile, ProfileRegistry};
use rnr_core::pipeline::FusionRule;
use rnr_core::provider::RetryPolicy;
use serde::{Deserialize, Serialize};

pub const ROLES: [&str; 4] = ["embedder", "rewriter", "reader", "annotator"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Mock,
    #[serde(rename = "openai")]
    OpenAi,
}

/// One model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    /// Mock chat behaviour, e.g. `echo` or `label-union`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<String>,
    /// Embedding length; required for mock embedders, optional check otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(skip)]
    pub api_key: Option<String>,
}

fn default_timeout() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Templates {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotate: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexPaths {
    /// Index file written by `index build` and read by `ask` and `eval`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Chunk JSONL whose texts are handed to the reader.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunks: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    pub max_in_flight: usize,
    pub min_interval_ms: u64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_in_flight: 4,
            min_interval_ms: 0,
        }
    }
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_inner: Option<usize>,
    #[serde(default)]
    pub fusion: FusionRule,
    #[serde(default = "one")]
    pub parallelism: usize,
    #[serde(default)]
    pub seed: u64,
    /// Chunking budget for `ingest`.
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_max_rewrites")]
    pub max_rewrites: usize,
    #[serde(default)]
    pub temperature: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    /// Where run manifests go.
    #[serde(default = "default_runs_dir")]
    pub runs_dir: PathBuf,
    #[serde(default)]
    pub templates: Templates,
    #[serde(default)]
    pub index: IndexPaths,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder: Option<Endpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewriter: Option<Endpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reader: Option<Endpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<Endpoint>,
    /// Extra exam extraction profiles for `ingest --exam --profile <name>`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub exam_profiles: BTreeMap<String, ExamPatterns>,
}

fn default_k() -> usize {
    rnr_core::pipeline::DEFAULT_K
}
fn one() -> usize {
    1
}
fn default_budget() -> usize {
    512
}
fn default_max_rewrites() -> usize {
    rnr_core::rewrite::DEFAULT_MAX_REWRITES
}
fn default_runs_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config deserializes")
    }
}

const TOP_KEYS: &[&str] = &[
    "k",
    "k_inner",
    "fusion",
    "parallelism",
    "seed",
    "budget",
    "max_rewrites",
    "temperature",
    "cache_dir",
    "runs_dir",
    "templates",
    "index",
    "limits",
    "retry",
    "embedder",
    "rewriter",
    "reader",
    "annotator",
    "exam_profiles",
];
const ENDPOINT_KEYS: &[&str] = &["kind", "model", "base_url", "behavior", "dim", "timeout_secs"];

fn section_keys(name: &str) -> Option<&'static [&'static str]> {
    Some(match name {
        "templates" => &["rewrite", "annotate"],
        "index" => &["path", "chunks"],
        "limits" => &["max_in_flight", "min_interval_ms"],
        "retry" => &["max_attempts", "initial_backoff_ms", "max_backoff_ms"],
        r if ROLES.contains(&r) => ENDPOINT_KEYS,
        _ => return None,
    })
}

/// Every key in `doc` that the schema does not know, as dotted paths.
fn unknown_keys(doc: &toml::Table) -> (Vec<String>, Vec<String>) {
    let mut unknown = Vec::new();
    let mut secrets = Vec::new();
    for (key, value) in doc {
        if !TOP_KEYS.contains(&key.as_str()) {
            unknown.push(key.clone());
            continue;
        }
        if let (Some(allowed), Some(table)) = (section_keys(key), value.as_table()) {
            for sub in table.keys() {
                if sub == "api_key" || sub == "token" {
                    secrets.push(format!("{key}.{sub}"));
                } else if !allowed.contains(&sub.as_str()) {
                    unknown.push(format!("{key}.{sub}"));
                }
            }
        }
    }
    (unknown, secrets)
}

fn env_parse<T: std::str::FromStr>(env: &HashMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match env.get(key) {
        Some(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| anyhow!("environment variable {key}={v:?}: {e}")),
        None => Ok(None),
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

/// Loads `path` (or defaults when `None`), applies environment overrides,
/// reads API keys from the environment and validates the result.
pub fn load_config(path: Option<&Path>, env: &HashMap<String, String>) -> Result<RunConfig> {
    let (mut cfg, base) = match path {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let doc: toml::Table = text
                .parse()
                .with_context(|| format!("config {} is not valid TOML", path.display()))?;
            let (unknown, secrets) = unknown_keys(&doc);
            if !secrets.is_empty() {
                bail!(
                    "config {} contains secrets ({}); API keys are read only from the environment (RNR_<ROLE>_API_KEY or OPENAI_API_KEY)",
                    path.display(),
                    secrets.join(", ")
                );
            }
            if !unknown.is_empty() {
                bail!("config {} has unknown keys: {}", path.display(), unknown.join(", "));
            }
            let cfg: RunConfig = toml::Value::Table(doc)
                .try_into()
                .with_context(|| format!("config {}", path.display()))?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (cfg, base)
        }
        None => (RunConfig::default(), PathBuf::new()),
    };

    if let Some(v) = env_parse(env, "RNR_K")? {
        cfg.k = v;
    }
    if let Some(v) = env_parse(env, "RNR_K_INNER")? {
        cfg.k_inner = Some(v);
    }
    if let Some(v) = env_parse(env, "RNR_FUSION")? {
        cfg.fusion = v;
    }
    if let Some(v) = env_parse(env, "RNR_PARALLELISM")? {
        cfg.parallelism = v;
    }
    if let Some(v) = env_parse(env, "RNR_SEED")? {
        cfg.seed = v;
    }
    if let Some(v) = env_parse(env, "RNR_BUDGET")? {
        cfg.budget = v;
    }
    if let Some(v) = env_parse(env, "RNR_TEMPERATURE")? {
        cfg.temperature = v;
    }
    if let Some(v) = env_parse(env, "RNR_MAX_REWRITES")? {
        cfg.max_rewrites = v;
    }
    if let Some(v) = env.get("RNR_CACHE_DIR") {
        cfg.cache_dir = Some(PathBuf::from(v));
    }
    if let Some(v) = env.get("RNR_RUNS_DIR") {
        cfg.runs_dir = PathBuf::from(v);
    }
    for role in ROLES {
        let upper = role.to_uppercase();
        let slot = cfg.endpoint_mut(role);
        if let Some(kind) = env.get(&format!("RNR_{upper}_KIND")) {
            let kind: ProviderKind = toml::Value::String(kind.clone())
                .try_into()
                .map_err(|_| anyhow!("RNR_{upper}_KIND must be mock or openai, got {kind:?}"))?;
            match slot {
                Some(ep) => ep.kind = kind,
                None => {
                    *slot = Some(Endpoint {
                        kind,
                        model: None,
                        base_url: None,
                        behavior: None,
                        dim: None,
                        timeout_secs: default_timeout(),
                        api_key: None,
                    })
                }
            }
        }
        if let Some(ep) = slot.as_mut() {
            if let Some(v) = env.get(&format!("RNR_{upper}_MODEL")) {
                ep.model = Some(v.clone());
            }
            if let Some(v) = env.get(&format!("RNR_{upper}_BASE_URL")) {
                ep.base_url = Some(v.clone());
            }
            if let Some(v) = env.get(&format!("RNR_{upper}_BEHAVIOR")) {
                ep.behavior = Some(v.clone());
            }
            ep.api_key = env
                .get(&format!("RNR_{upper}_API_KEY"))
                .or_else(|| env.get("OPENAI_API_KEY"))
                .filter(|k| !k.is_empty())
                .cloned();
        }
    }

    if path.is_some() {
        resolve(&base, &mut cfg.templates.rewrite);
        resolve(&base, &mut cfg.templates.annotate);
        resolve(&base, &mut cfg.index.path);
        resolve(&base, &mut cfg.index.chunks);
        resolve(&base, &mut cfg.cache_dir);
        if cfg.runs_dir.is_relative() {
            cfg.runs_dir = base.join(&cfg.runs_dir);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    fn endpoint_mut(&mut self, role: &str) -> &mut Option<Endpoint> {
        match role {
            "embedder" => &mut self.embedder,
            "rewriter" => &mut self.rewriter,
            "reader" => &mut self.reader,
            "annotator" => &mut self.annotator,
            _ => unreachable!("unknown role {role}"),
        }
    }

    pub fn endpoint(&self, role: &str) -> Option<&Endpoint> {
        match role {
            "embedder" => self.embedder.as_ref(),
            "rewriter" => self.rewriter.as_ref(),
            "reader" => self.reader.as_ref(),
            "annotator" => self.annotator.as_ref(),
            _ => None,
        }
    }

    /// The endpoint for `role`, or an error naming the command that needs it.
    pub fn require(&self, role: &str, command: &str) -> Result<&Endpoint> {
        self.endpoint(role).ok_or_else(|| {
            anyhow!(
                "`{command}` needs a [{role}] endpoint in the config (for offline runs: [{role}] kind = \"mock\")"
            )
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            bail!("k must be at least 1");
        }
        if self.k_inner == Some(0) {
            bail!("k_inner must be at least 1");
        }
        if self.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        if self.max_rewrites == 0 {
            bail!("max_rewrites must be at least 1");
        }
        if self.limits.max_in_flight == 0 {
            bail!("limits.max_in_flight must be at least 1");
        }
        if self.retry.max_attempts == 0 {
            bail!("retry.max_attempts must be at least 1");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            bail!("temperature must be within [0, 2]");
        }
        if self.budget < rnr_core::ingest::MIN_BUDGET {
            bail!("budget must be at least {}", rnr_core::ingest::MIN_BUDGET);
        }
        let mut missing = BTreeSet::new();
        for (name, p) in [("templates.rewrite", &self.templates.rewrite), ("templates.annotate", &self.templates.annotate)] {
            if let Some(p) = p {
                if !p.is_file() {
                    missing.insert(format!("{name} = {}", p.display()));
                }
            }
        }
        if !missing.is_empty() {
            bail!(
                "config references files that do not exist: {}",
                missing.into_iter().collect::<Vec<_>>().join(", ")
            );
        }
        for role in ROLES {
            if let Some(ep) = self.endpoint(role) {
                match ep.kind {
                    ProviderKind::OpenAi => {
                        if ep.base_url.is_none() || ep.model.is_none() {
                            bail!("[{role}] kind = \"openai\" needs base_url and model");
                        }
                    }
                    ProviderKind::Mock => {
                        if let Some(b) = &ep.behavior {
                            if role != "embedder" {
                                b.parse::<rnr_core::provider::MockBehavior>()
                                    .map_err(|e| anyhow!("[{role}] {e}"))?;
                            }
                        }
                    }
                }
                if ep.dim == Some(0) {
                    bail!("[{role}] dim must be positive");
                }
            }
        }
        self.exam_registry()?;
        Ok(())
    }

    /// Built-in exam profiles plus those from `[exam_profiles.<name>]`.
    pub fn exam_registry(&self) -> Result<ProfileRegistry> {
        let mut registry = ProfileRegistry::default();
        for (name, patterns) in &self.exam_profiles {
            registry.insert(ExamProfile::from_patterns(name, patterns)?);
        }
        Ok(registry)
    }

    /// The configuration as JSON with secrets replaced.
    pub fn redacted_snapshot(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("serializable config");
        for role in ROLES {
            if let Some(ep) = self.endpoint(role) {
                if ep.api_key.is_some() {
                    v[role]["api_key"] = serde_json::Value::String("<redacted>".into());
                }
            }
        }
        v
    }
}
