//! Builds providers, indexes and pipelines from a [`RunConfig`].

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use rnr_core::embed::EmbedClient;
use rnr_core::ingest::Chunk;
use rnr_core::pipeline::{Mode, Pipeline, PipelineSettings, DEFAULT_READER_INSTRUCTION};
use rnr_core::provider::{
    ChatModel, Embedder, HttpConfig, MockBehavior, MockChat, MockEmbedder, OpenAiCompatClient, RateLimiter,
    DEFAULT_MOCK_DIM,
};
use rnr_core::rewrite::{PromptTemplate, Rewriter};
use rnr_core::store::VectorIndex;
use serde::de::DeserializeOwned;

use crate::config::{Endpoint, ProviderKind, RunConfig};

/// Providers and limiter shared by every client in one process.
pub struct Wiring<'a> {
    pub cfg: &'a RunConfig,
    pub limiter: Arc<RateLimiter>,
}

fn default_behavior(role: &str) -> MockBehavior {
    match role {
        "rewriter" => MockBehavior::LastBlock,
        "annotator" => MockBehavior::Annotate,
        _ => MockBehavior::Echo,
    }
}

fn http_config(ep: &Endpoint) -> HttpConfig {
    HttpConfig {
        base_url: ep.base_url.clone().unwrap_or_default(),
        model: ep.model.clone().unwrap_or_default(),
        api_key: ep.api_key.clone(),
        timeout: Duration::from_secs(ep.timeout_secs),
        dim: ep.dim,
    }
}

impl<'a> Wiring<'a> {
    pub fn new(cfg: &'a RunConfig) -> Self {
        let limiter = Arc::new(RateLimiter::new(
            cfg.limits.max_in_flight,
            Duration::from_millis(cfg.limits.min_interval_ms),
        ));
        Self { cfg, limiter }
    }

    pub fn chat(&self, role: &str, command: &str) -> Result<Arc<dyn ChatModel>> {
        let ep = self.cfg.require(role, command)?;
        Ok(match ep.kind {
            ProviderKind::Mock => {
                let behavior = match &ep.behavior {
                    Some(b) => b.parse().map_err(|e: String| anyhow!("[{role}] {e}"))?,
                    None => default_behavior(role),
                };
                Arc::new(MockChat::new(behavior))
            }
            ProviderKind::OpenAi => Arc::new(OpenAiCompatClient::new(http_config(ep), self.limiter.clone())?),
        })
    }

    pub fn embedder(&self, command: &str) -> Result<Arc<EmbedClient>> {
        let ep = self.cfg.require("embedder", command)?;
        let provider: Arc<dyn Embedder> = match ep.kind {
            ProviderKind::Mock => Arc::new(MockEmbedder::new(ep.dim.unwrap_or(DEFAULT_MOCK_DIM), self.cfg.seed)),
            ProviderKind::OpenAi => Arc::new(OpenAiCompatClient::new(http_config(ep), self.limiter.clone())?),
        };
        let mut client = EmbedClient::new(provider)
            .with_retry(self.cfg.retry.clone())
            .with_parallelism(self.cfg.parallelism);
        if let Some(dir) = &self.cfg.cache_dir {
            client = client.with_disk_cache(dir.join("embeddings"));
        }
        Ok(Arc::new(client))
    }

    pub fn rewrite_template(&self, flag: Option<&Path>, command: &str) -> Result<PromptTemplate> {
        let path = flag
            .map(Path::to_path_buf)
            .or_else(|| self.cfg.templates.rewrite.clone())
            .ok_or_else(|| anyhow!("`{command}` needs a rewrite template: pass --template or set [templates] rewrite"))?;
        Ok(PromptTemplate::load(&path)?)
    }

    pub fn rewriter(&self, template: PromptTemplate, command: &str) -> Result<Rewriter> {
        let mut r = Rewriter::new(template, self.chat("rewriter", command)?);
        r.max_rewrites = self.cfg.max_rewrites;
        r.temperature = self.cfg.temperature;
        r.retry = self.cfg.retry.clone();
        Ok(r)
    }

    /// Loads the index and chunk texts, naming what is missing and how to
    /// produce it.
    pub fn retrieval(
        &self,
        idx_flag: Option<&Path>,
        chunks_flag: Option<&Path>,
        mode: Mode,
    ) -> Result<(Arc<VectorIndex>, HashMap<String, String>)> {
        let idx = idx_flag
            .map(Path::to_path_buf)
            .or_else(|| self.cfg.index.path.clone())
            .ok_or_else(|| {
                anyhow!(
                    "mode {mode} needs a vector index: pass --idx or set [index] path, after building one with `rnr index build`"
                )
            })?;
        if !idx.is_file() {
            bail!(
                "mode {mode} needs a vector index but {} does not exist; build it with `rnr index build --chunks <chunks.jsonl> --out {}`",
                idx.display(),
                idx.display()
            );
        }
        let index = VectorIndex::load(&idx)?;
        let chunks_path = chunks_flag
            .map(Path::to_path_buf)
            .or_else(|| self.cfg.index.chunks.clone())
            .ok_or_else(|| anyhow!("mode {mode} needs the chunk file: pass --chunks or set [index] chunks"))?;
        let chunks: Vec<Chunk> = read_jsonl(&chunks_path)?;
        let texts: HashMap<String, String> = chunks.into_iter().map(|c| (c.chunk_id, c.text)).collect();
        if let Some((id, _)) = index.entries().find(|(id, _)| !texts.contains_key(*id)) {
            bail!(
                "index {} contains chunk {id} which is missing from {}",
                idx.display(),
                chunks_path.display()
            );
        }
        Ok((Arc::new(index), texts))
    }

    /// A pipeline with exactly the components `mode` needs.
    pub fn pipeline(
        &self,
        mode: Mode,
        command: &str,
        template_flag: Option<&Path>,
        idx_flag: Option<&Path>,
        chunks_flag: Option<&Path>,
    ) -> Result<(Pipeline, Vec<std::path::PathBuf>)> {
        let reader = self.chat("reader", command)?;
        let mut p = Pipeline::new(reader);
        let mut inputs = Vec::new();
        let template = if mode == Mode::Full || template_flag.is_some() || self.cfg.templates.rewrite.is_some() {
            Some(self.rewrite_template(template_flag, command)?)
        } else {
            None
        };
        if let Some(t) = &template {
            if let Some(instr) = &t.reader_instruction {
                p.reader_instruction = instr.clone();
            }
        }
        if p.reader_instruction.trim().is_empty() {
            p.reader_instruction = DEFAULT_READER_INSTRUCTION.to_string();
        }
        if mode == Mode::Full {
            p.rewriter = Some(self.rewriter(template.expect("checked above"), command)?);
        }
        if mode != Mode::NoRetrieval {
            let (index, texts) = self.retrieval(idx_flag, chunks_flag, mode)?;
            let embedder = self.embedder(command)?;
            if embedder.tag() != index.provider_tag() {
                bail!(
                    "index was built with embedder {} but the config uses {}; rebuild the index or switch embedders",
                    index.provider_tag(),
                    embedder.tag()
                );
            }
            p.embedder = Some(embedder);
            p.index = Some(index);
            p.chunk_texts = Arc::new(texts);
            if let Some(path) = idx_flag.map(Path::to_path_buf).or_else(|| self.cfg.index.path.clone()) {
                inputs.push(path);
            }
            if let Some(path) = chunks_flag.map(Path::to_path_buf).or_else(|| self.cfg.index.chunks.clone()) {
                inputs.push(path);
            }
        }
        p.settings = PipelineSettings {
            k: self.cfg.k,
            k_inner: self.cfg.k_inner,
            fusion: self.cfg.fusion,
            temperature: self.cfg.temperature,
            parallelism: self.cfg.parallelism,
            retry: self.cfg.retry.clone(),
        };
        Ok((p, inputs))
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}: invalid record", path.display(), i + 1)))
        .collect()
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}
