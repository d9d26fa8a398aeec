//! Rewrite, retrieve per rewrite, fuse to a global top-k, then read.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embed::{EmbedClient, EmbedError};
use crate::par::par_map;
use crate::provider::{complete_with_retries, ChatMessage, ChatModel, ProviderError, RetryPolicy};
use crate::rewrite::{RewriteError, RewriteSet, Rewriter};
use crate::store::{StoreError, VectorIndex};

/// Default number of documents handed to the reader.
pub const DEFAULT_K: usize = 4;

pub const DEFAULT_READER_INSTRUCTION: &str = "Answer the question using the reference documents \
below. If the question is multiple choice, reply with the letter(s) of the correct option(s) \
first, then a brief justification.";

/// A retrieved chunk with its similarity and the rewrite that found it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub chunk_id: String,
    pub score: f64,
    pub source_rewrite: usize,
}

/// How per-rewrite result lists are combined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionRule {
    /// Best similarity across rewrites.
    #[default]
    Max,
    /// Sum of similarities across rewrites.
    Sum,
    /// Reciprocal rank fusion, `sum 1 / (60 + rank)`.
    Rrf,
}

impl std::str::FromStr for FusionRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "max" => Ok(Self::Max),
            "sum" => Ok(Self::Sum),
            "rrf" => Ok(Self::Rrf),
            _ => Err(format!("unknown fusion rule {s:?} (expected max, sum or rrf)")),
        }
    }
}

const RRF_K: f64 = 60.0;

fn rank_order(a: &ScoredDoc, b: &ScoredDoc) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.chunk_id.cmp(&b.chunk_id))
}

/// Max-score fusion: one entry per chunk with its best score (smallest
/// `source_rewrite` among equal bests), global top `k` by score then chunk id.
pub fn fuse(per_rewrite: &[Vec<ScoredDoc>], k: usize) -> Vec<ScoredDoc> {
    fuse_with(per_rewrite, k, FusionRule::Max)
}

pub fn fuse_with(per_rewrite: &[Vec<ScoredDoc>], k: usize, rule: FusionRule) -> Vec<ScoredDoc> {
    let mut best: HashMap<&str, ScoredDoc> = HashMap::new();
    let mut fused_score: HashMap<&str, f64> = HashMap::new();
    for list in per_rewrite {
        for (rank, doc) in list.iter().enumerate() {
            if doc.score.is_nan() {
                continue;
            }
            let contribution = match rule {
                FusionRule::Max => doc.score,
                FusionRule::Sum => doc.score,
                FusionRule::Rrf => 1.0 / (RRF_K + rank as f64 + 1.0),
            };
            match rule {
                FusionRule::Max => {}
                FusionRule::Sum | FusionRule::Rrf => {
                    *fused_score.entry(&doc.chunk_id).or_insert(0.0) += contribution;
                }
            }
            best.entry(&doc.chunk_id)
                .and_modify(|cur| {
                    let better = doc.score > cur.score
                        || (doc.score == cur.score && doc.source_rewrite < cur.source_rewrite);
                    if better {
                        *cur = doc.clone();
                    }
                })
                .or_insert_with(|| doc.clone());
        }
    }
    let mut out: Vec<ScoredDoc> = best
        .into_iter()
        .map(|(id, mut doc)| {
            if let Some(s) = fused_score.get(id) {
                doc.score = *s;
            }
            doc
        })
        .collect();
    out.sort_by(rank_order);
    out.truncate(k);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Rewrite, retrieve per rewrite, fuse, read.
    #[default]
    Full,
    /// Retrieve with the original query only.
    NoRewrite,
    /// Send the question to the reader with no documents.
    NoRetrieval,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Self::Full),
            "no_rewrite" => Ok(Self::NoRewrite),
            "no_retrieval" => Ok(Self::NoRetrieval),
            _ => Err(format!("unknown mode {s:?} (expected full, no_rewrite or no_retrieval)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::NoRewrite => "no_rewrite",
            Mode::NoRetrieval => "no_retrieval",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagAnswer {
    pub question: String,
    pub rewrites: RewriteSet,
    pub retrieved: Vec<ScoredDoc>,
    pub answer_text: String,
    pub reader_prompt: String,
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Setup,
    Rewrite,
    Embed,
    Retrieve,
    Read,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Setup => "setup",
            Stage::Rewrite => "rewrite",
            Stage::Embed => "embed",
            Stage::Retrieve => "retrieve",
            Stage::Read => "read",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
    /// Provider/transport failure as opposed to misuse or bad data.
    pub transport: bool,
}

impl PipelineError {
    fn setup(message: impl Into<String>) -> Self {
        Self {
            stage: Stage::Setup,
            message: message.into(),
            transport: false,
        }
    }
}

impl From<RewriteError> for PipelineError {
    fn from(e: RewriteError) -> Self {
        let transport = matches!(e, RewriteError::Transport { .. });
        Self {
            stage: Stage::Rewrite,
            message: e.to_string(),
            transport,
        }
    }
}

impl From<EmbedError> for PipelineError {
    fn from(e: EmbedError) -> Self {
        Self {
            stage: Stage::Embed,
            transport: e.is_retryable() || matches!(e, EmbedError::Provider { .. }),
            message: e.to_string(),
        }
    }
}

impl From<StoreError> for PipelineError {
    fn from(e: StoreError) -> Self {
        Self {
            stage: Stage::Retrieve,
            message: e.to_string(),
            transport: false,
        }
    }
}

/// Knobs for one pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    /// Final number of documents for the reader.
    pub k: usize,
    /// Per-rewrite retrieval depth; defaults to `k`.
    pub k_inner: Option<usize>,
    pub fusion: FusionRule,
    pub temperature: f32,
    pub parallelism: usize,
    pub retry: RetryPolicy,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            k_inner: None,
            fusion: FusionRule::Max,
            temperature: 0.0,
            parallelism: 1,
            retry: RetryPolicy::default(),
        }
    }
}

/// The wired-up components. Only what a mode needs has to be present.
#[derive(Clone)]
pub struct Pipeline {
    pub rewriter: Option<Rewriter>,
    pub embedder: Option<Arc<EmbedClient>>,
    pub index: Option<Arc<VectorIndex>>,
    pub chunk_texts: Arc<HashMap<String, String>>,
    pub reader: Arc<dyn ChatModel>,
    pub reader_instruction: String,
    pub settings: PipelineSettings,
}

/// Builds the reader prompt: instruction, numbered documents in the given
/// order, then the question.
pub fn reader_prompt(instruction: &str, docs: &[&str], question: &str) -> String {
    let mut blocks = vec![instruction.trim().to_string()];
    for (i, text) in docs.iter().enumerate() {
        blocks.push(format!("Document {}:\n{}", i + 1, text.trim()));
    }
    blocks.push(format!("Question: {question}"));
    blocks.join("\n\n")
}

impl Pipeline {
    pub fn new(reader: Arc<dyn ChatModel>) -> Self {
        Self {
            rewriter: None,
            embedder: None,
            index: None,
            chunk_texts: Arc::new(HashMap::new()),
            reader,
            reader_instruction: DEFAULT_READER_INSTRUCTION.to_string(),
            settings: PipelineSettings::default(),
        }
    }

    pub fn answer(&self, q: &str, mode: Mode) -> Result<RagAnswer, PipelineError> {
        self.answer_with_k(q, self.settings.k, mode)
    }

    pub fn answer_with_k(&self, q: &str, k: usize, mode: Mode) -> Result<RagAnswer, PipelineError> {
        if q.trim().is_empty() {
            return Err(PipelineError::setup("question is empty"));
        }
        if k == 0 {
            return Err(PipelineError::setup("k must be at least 1"));
        }
        let rewrites = match mode {
            Mode::Full => self
                .rewriter
                .as_ref()
                .ok_or_else(|| PipelineError::setup("mode full needs a rewriter"))?
                .rewrite(q)?,
            Mode::NoRewrite | Mode::NoRetrieval => RewriteSet::identity(q),
        };

        let retrieved = match mode {
            Mode::NoRetrieval => Vec::new(),
            Mode::Full | Mode::NoRewrite => self.retrieve(&rewrites.rewrites, k, mode)?,
        };

        let docs: Vec<&str> = retrieved
            .iter()
            .map(|d| {
                self.chunk_texts.get(&d.chunk_id).map(String::as_str).ok_or_else(|| PipelineError {
                    stage: Stage::Retrieve,
                    message: format!("no text for retrieved chunk {}", d.chunk_id),
                    transport: false,
                })
            })
            .collect::<Result<_, _>>()?;
        let prompt = reader_prompt(&self.reader_instruction, &docs, q);
        let (answer_text, _) = complete_with_retries(
            self.reader.as_ref(),
            &[ChatMessage::user(prompt.clone())],
            self.settings.temperature,
            &self.settings.retry,
        )
        .map_err(|e: ProviderError| PipelineError {
            stage: Stage::Read,
            transport: !matches!(e, ProviderError::Integrity(_)),
            message: e.to_string(),
        })?;

        Ok(RagAnswer {
            question: q.to_string(),
            rewrites,
            retrieved,
            answer_text,
            reader_prompt: prompt,
            mode,
        })
    }

    fn retrieve(&self, queries: &[String], k: usize, mode: Mode) -> Result<Vec<ScoredDoc>, PipelineError> {
        let index = self.index.as_ref().ok_or_else(|| {
            PipelineError::setup(format!("mode {mode} needs a vector index; build one with `index build`"))
        })?;
        let embedder = self
            .embedder
            .as_ref()
            .ok_or_else(|| PipelineError::setup(format!("mode {mode} needs an embedder")))?;
        let vectors = embedder.embed_batch(queries)?.vectors;
        let k_inner = self.settings.k_inner.unwrap_or(k).max(1);
        let lists = par_map(&vectors, self.settings.parallelism, |i, v| {
            index.search(v, k_inner).map(|hits| {
                hits.into_iter()
                    .map(|mut d| {
                        d.source_rewrite = i;
                        d
                    })
                    .collect::<Vec<_>>()
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        Ok(fuse_with(&lists, k, self.settings.fusion))
    }
}
