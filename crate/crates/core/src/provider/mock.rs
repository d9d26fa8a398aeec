use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};

use super::{ChatMessage, ChatModel, Embedder, ProviderError};

/// Offline embedder: a bag of character 3-grams projected through a fixed
/// pseudo-random ±1 matrix, then scaled to unit length.
///
/// Each distinct 3-gram owns one matrix row derived from `(seed, gram)`, so
/// texts that share more 3-grams have higher expected cosine similarity.
#[derive(Debug)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
    rows: Mutex<HashMap<String, Arc<[f32]>>>,
}

pub const DEFAULT_MOCK_DIM: usize = 256;

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "mock embedder needs a positive dimension");
        Self {
            dim,
            seed,
            rows: Mutex::new(HashMap::new()),
        }
    }

    fn row(&self, gram: &str) -> Arc<[f32]> {
        if let Some(r) = self.rows.lock().unwrap().get(gram) {
            return r.clone();
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(gram.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        let mut row = Vec::with_capacity(self.dim);
        let mut bits = 0u64;
        for i in 0..self.dim {
            if i % 64 == 0 {
                bits = rng.next_u64();
            }
            row.push(if bits >> (i % 64) & 1 == 1 { 1.0 } else { -1.0 });
        }
        let row: Arc<[f32]> = row.into();
        self.rows
            .lock()
            .unwrap()
            .insert(gram.to_string(), row.clone());
        row
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let grams = char_trigrams(text);
        let mut acc = vec![0f64; self.dim];
        for (gram, count) in &grams {
            let row = self.row(gram);
            for (a, r) in acc.iter_mut().zip(row.iter()) {
                *a += *count as f64 * *r as f64;
            }
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Degenerate cancellation; fall back to the first gram's row.
            let first = grams.keys().next().cloned().unwrap_or_default();
            let row = self.row(&first);
            let s = (self.dim as f32).sqrt();
            return row.iter().map(|x| x / s).collect();
        }
        acc.iter().map(|x| (x / norm) as f32).collect()
    }
}

/// Lowercased, whitespace-collapsed character 3-grams with counts.
///
/// Texts shorter than three characters yield themselves as a single gram.
pub fn char_trigrams(text: &str) -> BTreeMap<String, usize> {
    let norm: Vec<char> = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
        .chars()
        .collect();
    let mut out = BTreeMap::new();
    if norm.len() < 3 {
        out.insert(norm.iter().collect(), 1);
        return out;
    }
    for w in norm.windows(3) {
        *out.entry(w.iter().collect()).or_insert(0) += 1;
    }
    out
}

impl Embedder for MockEmbedder {
    fn tag(&self) -> String {
        format!("mock:trigram-{}-seed{}", self.dim, self.seed)
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Embedder stub that fails a scripted number of calls before delegating.
pub struct ScriptedEmbedder<E> {
    inner: E,
    failures_left: AtomicUsize,
    calls: AtomicUsize,
    texts_seen: AtomicUsize,
    wrong_dim: Option<usize>,
}

impl<E: Embedder> ScriptedEmbedder<E> {
    pub fn failing_first(inner: E, failures: usize) -> Self {
        Self {
            inner,
            failures_left: AtomicUsize::new(failures),
            calls: AtomicUsize::new(0),
            texts_seen: AtomicUsize::new(0),
            wrong_dim: None,
        }
    }

    /// Returns vectors of the wrong length.
    pub fn with_wrong_dim(inner: E, dim: usize) -> Self {
        Self {
            wrong_dim: Some(dim),
            ..Self::failing_first(inner, 0)
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn texts_seen(&self) -> usize {
        self.texts_seen.load(Ordering::SeqCst)
    }
}

impl<E: Embedder> Embedder for ScriptedEmbedder<E> {
    fn tag(&self) -> String {
        self.inner.tag()
    }

    fn dim(&self) -> Option<usize> {
        self.inner.dim()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let left = self.failures_left.load(Ordering::SeqCst);
        if left > 0 {
            self.failures_left.store(left - 1, Ordering::SeqCst);
            return Err(ProviderError::transport("scripted failure"));
        }
        self.texts_seen.fetch_add(texts.len(), Ordering::SeqCst);
        if let Some(d) = self.wrong_dim {
            return Ok(texts.iter().map(|_| vec![1.0; d]).collect());
        }
        self.inner.embed(texts)
    }
}

/// Canned behaviours for the offline chat model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockBehavior {
    /// Returns the last user message verbatim.
    Echo,
    /// Returns the final blank-line separated block of the prompt, minus a
    /// leading `Input:`/`Question:` label, as a one-item numbered list. This
    /// makes it an identity rewriter for the shipped templates.
    LastBlock,
    /// Collects every `EVIDENCE: <label>` line in the prompt and answers
    /// with the sorted distinct labels, or `none`.
    LabelUnion,
    /// Reads `Question:` and `Answer:` lines from the final prompt block and
    /// replies in the annotation format: an `ANALYSIS:` section, then
    /// `REWRITES:` with the question and the question joined to the answer.
    Annotate,
    /// Always returns the given text.
    Fixed(String),
}

impl std::str::FromStr for MockBehavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "echo" => Ok(Self::Echo),
            "last-block" => Ok(Self::LastBlock),
            "label-union" => Ok(Self::LabelUnion),
            "annotate" => Ok(Self::Annotate),
            _ => match s.strip_prefix("fixed:") {
                Some(text) => Ok(Self::Fixed(text.to_string())),
                None => Err(format!(
                    "unknown mock behavior {s:?} (expected echo, last-block, label-union, annotate or fixed:<text>)"
                )),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockChat {
    behavior: MockBehavior,
    calls: Arc<AtomicUsize>,
}

impl MockChat {
    pub fn new(behavior: MockBehavior) -> Self {
        Self {
            behavior,
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

fn last_user(messages: &[ChatMessage]) -> &str {
    messages
        .iter()
        .rev()
        .find(|m| m.role == "user")
        .map_or("", |m| m.content.as_str())
}

impl ChatModel for MockChat {
    fn tag(&self) -> String {
        match &self.behavior {
            MockBehavior::Echo => "mock:echo".into(),
            MockBehavior::LastBlock => "mock:last-block".into(),
            MockBehavior::LabelUnion => "mock:label-union".into(),
            MockBehavior::Annotate => "mock:annotate".into(),
            MockBehavior::Fixed(_) => "mock:fixed".into(),
        }
    }

    fn complete(&self, messages: &[ChatMessage], _temperature: f32) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = last_user(messages);
        Ok(match &self.behavior {
            MockBehavior::Echo => prompt.to_string(),
            MockBehavior::LastBlock => {
                static LABEL: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
                let re = LABEL.get_or_init(|| Regex::new(r"(?i)^(?:input|question|query)\s*[:：]\s*").unwrap());
                let block = prompt.trim_end().rsplit("\n\n").next().unwrap_or("").trim();
                format!("1. {}", re.replace(block, ""))
            }
            MockBehavior::LabelUnion => {
                static EVIDENCE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
                let re = EVIDENCE.get_or_init(|| Regex::new(r"EVIDENCE:\s*([A-Z])\b").unwrap());
                let labels: std::collections::BTreeSet<&str> = re
                    .captures_iter(prompt)
                    .map(|c| c.get(1).unwrap().as_str())
                    .collect();
                if labels.is_empty() {
                    "none".to_string()
                } else {
                    labels.into_iter().collect()
                }
            }
            MockBehavior::Annotate => {
                let block = prompt.trim_end().rsplit("\n\n").next().unwrap_or("");
                let field = |name: &str| {
                    block
                        .lines()
                        .find_map(|l| l.trim().strip_prefix(name))
                        .map(|v| v.trim().to_string())
                        .unwrap_or_default()
                };
                let (q, a) = (field("Question:"), field("Answer:"));
                format!(
                    "ANALYSIS:\nThe question asks: {q}\nThe reference answer is: {a}\nREWRITES:\n1. {q}\n2. {q} {a}"
                )
            }
            MockBehavior::Fixed(t) => t.clone(),
        })
    }
}

/// Chat stub that replays scripted results in order, repeating the last one.
pub struct ScriptedChat {
    script: Mutex<VecDeque<Result<String, ProviderError>>>,
    last: Mutex<Option<Result<String, ProviderError>>>,
    calls: AtomicUsize,
}

impl ScriptedChat {
    pub fn new(script: Vec<Result<String, ProviderError>>) -> Self {
        Self {
            script: Mutex::new(script.into()),
            last: Mutex::new(None),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn always(text: impl Into<String>) -> Self {
        Self::new(vec![Ok(text.into())])
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatModel for ScriptedChat {
    fn tag(&self) -> String {
        "mock:scripted".into()
    }

    fn complete(&self, _messages: &[ChatMessage], _t: f32) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let next = self.script.lock().unwrap().pop_front();
        let mut last = self.last.lock().unwrap();
        if let Some(r) = next {
            *last = Some(r);
        }
        last.clone().unwrap_or_else(|| Ok(String::new()))
    }
}

type ChatFn = dyn Fn(&[ChatMessage]) -> Result<String, ProviderError> + Send + Sync;

/// Chat model backed by a closure.
pub struct FnChat {
    tag: String,
    f: Box<ChatFn>,
}

impl FnChat {
    pub fn new(
        tag: impl Into<String>,
        f: impl Fn(&[ChatMessage]) -> Result<String, ProviderError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            tag: tag.into(),
            f: Box::new(f),
        }
    }
}

impl ChatModel for FnChat {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn complete(&self, messages: &[ChatMessage], _t: f32) -> Result<String, ProviderError> {
        (self.f)(messages)
    }
}
