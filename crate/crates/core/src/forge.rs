//! Training-data export: pretraining samples from chunks, rewrite supervision
//! pairs from an annotator model, and token-proportional corpus sampling.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ingest::split::{pack_greedy, split_paragraphs, Chunk, MIN_BUDGET};
use crate::par::par_map;
use crate::provider::{complete_with_retries, ChatMessage, ChatModel, RetryPolicy};
use crate::rewrite::{assemble_prompt_with, format_numbered, parse_rewrites, PromptTemplate};
use crate::tokenize::{token_spans, Tokenizer};

pub const DEFAULT_CPT_CUTOFF: usize = 512;
pub const DEFAULT_SFT_CUTOFF: usize = 2048;
/// Slot for the reference answer in annotation templates.
pub const ANSWER_SLOT: &str = "{answer}";

/// Instruction written into every supervised pair.
pub const SFT_INSTRUCTION: &str = "Rewrite the user's question into a numbered list of search \
queries phrased the way the reference documents are written.";

#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error("cutoff {cutoff} is below the minimum of {min}")]
    Cutoff { cutoff: usize, min: usize },
    #[error("fraction must be in (0, 1], got {0}")]
    Fraction(f64),
    #[error("annotation template: {0}")]
    Template(String),
    #[error("qa pair {index}: {message}")]
    Input { index: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ForgeError + '_ {
    move |source| ForgeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CptSample {
    pub text: String,
    pub token_count: usize,
    pub source_chunk: String,
}

/// Turns chunks into pretraining samples of at most `cutoff` tokens.
///
/// Counting covers the whole chunk text, headings included. A chunk within
/// the cutoff passes through unchanged. Larger chunks are cut into greedy
/// runs of consecutive paragraphs; a single paragraph over the cutoff is cut
/// at token boundaries.
pub fn gen_cpt(
    chunks: &[Chunk],
    cutoff: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<CptSample>, ForgeError> {
    if cutoff < MIN_BUDGET {
        return Err(ForgeError::Cutoff {
            cutoff,
            min: MIN_BUDGET,
        });
    }
    let mut out = Vec::new();
    for chunk in chunks {
        let total = tokenizer.count(&chunk.text);
        if total <= cutoff {
            if total > 0 {
                out.push(CptSample {
                    text: chunk.text.clone(),
                    token_count: total,
                    source_chunk: chunk.chunk_id.clone(),
                });
            }
            continue;
        }
        for piece in cut_text(&chunk.text, cutoff, tokenizer) {
            let token_count = tokenizer.count(piece);
            debug_assert!(token_count <= cutoff);
            if token_count > 0 {
                out.push(CptSample {
                    text: piece.to_string(),
                    token_count,
                    source_chunk: chunk.chunk_id.clone(),
                });
            }
        }
    }
    Ok(out)
}

fn offset_in(outer: &str, inner: &str) -> usize {
    inner.as_ptr() as usize - outer.as_ptr() as usize
}

fn cut_text<'a>(text: &'a str, cutoff: usize, tokenizer: &dyn Tokenizer) -> Vec<&'a str> {
    let paragraphs = split_paragraphs(text);
    let counts: Vec<usize> = paragraphs.iter().map(|p| tokenizer.count(p)).collect();
    let mut pieces = Vec::new();
    for (range, tokens) in pack_greedy(&counts, cutoff) {
        let first = paragraphs[range.start];
        let last = paragraphs[range.end - 1];
        if tokens > cutoff {
            pieces.extend(hard_split(first, cutoff, tokenizer));
        } else {
            let start = offset_in(text, first);
            let end = offset_in(text, last) + last.len();
            pieces.push(&text[start..end]);
        }
    }
    pieces
}

/// Cuts one paragraph at token boundaries into pieces of at most `cutoff`.
fn hard_split<'a>(para: &'a str, cutoff: usize, tokenizer: &dyn Tokenizer) -> Vec<&'a str> {
    let spans = token_spans(para);
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < spans.len() {
        let fits = |end: usize| tokenizer.count(&para[spans[start].0..spans[end - 1].1]) <= cutoff;
        // Largest end in (start, len] that fits; at least one token.
        let (mut lo, mut hi) = (start + 1, spans.len());
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if fits(mid) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        pieces.push(&para[spans[start].0..spans[lo - 1].1]);
        start = lo;
    }
    pieces
}

/// Selects about `fraction` of each document's tokens, deterministically.
///
/// Chunks of each document are visited in a seeded random order and taken
/// while doing so brings the running total closer to the target; any
/// shortfall or excess carries into the next document. Output keeps the
/// input order.
pub fn sample_corpus(chunks: &[Chunk], fraction: f64, seed: u64) -> Result<Vec<Chunk>, ForgeError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ForgeError::Fraction(fraction));
    }
    if fraction == 1.0 {
        return Ok(chunks.to_vec());
    }
    let mut by_doc: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut doc_pos: HashMap<&str, usize> = HashMap::new();
    for (i, c) in chunks.iter().enumerate() {
        let pos = *doc_pos.entry(&c.doc_id).or_insert_with(|| {
            by_doc.push((&c.doc_id, Vec::new()));
            by_doc.len() - 1
        });
        by_doc[pos].1.push(i);
    }

    let mut keep = vec![false; chunks.len()];
    let mut carry = 0.0f64;
    for (doc_id, mut members) in by_doc {
        let doc_tokens: usize = members.iter().map(|&i| chunks[i].token_count).sum();
        let target = fraction * doc_tokens as f64 + carry;
        let mut rng = ChaCha8Rng::from_seed(doc_seed(seed, doc_id));
        members.shuffle(&mut rng);
        let mut taken = 0.0f64;
        for i in members {
            let c = chunks[i].token_count as f64;
            if taken + c / 2.0 <= target {
                keep[i] = true;
                taken += c;
            }
        }
        carry = target - taken;
    }
    Ok(chunks
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(c, _)| c.clone())
        .collect())
}

fn doc_seed(seed: u64, doc_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(doc_id.as_bytes());
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftPair {
    pub question: String,
    pub analysis: String,
    pub rewrites: Vec<String>,
    pub annotator_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftSkip {
    pub index: usize,
    pub question: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SftOutcome {
    pub pairs: Vec<SftPair>,
    pub skips: Vec<SftSkip>,
}

#[derive(Debug, Clone)]
pub struct AnnotateOptions {
    pub max_rewrites: usize,
    pub temperature: f32,
    pub retry: RetryPolicy,
    pub parallelism: usize,
    /// Token limit over question, analysis and rewrites; only the analysis is cut.
    pub sft_cutoff: usize,
    /// Raw annotator responses are cached here when set.
    pub cache_dir: Option<PathBuf>,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        Self {
            max_rewrites: 8,
            temperature: 0.0,
            retry: RetryPolicy::default(),
            parallelism: 1,
            sft_cutoff: DEFAULT_SFT_CUTOFF,
            cache_dir: None,
        }
    }
}

fn analysis_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[\s#*]*analysis[\s*]*[:：][*\s]*").unwrap())
}

fn rewrites_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[\s#*]*rewrites[\s*]*[:：][*\s]*").unwrap())
}

/// Splits an annotator response into analysis and rewrites by its
/// `ANALYSIS:` and `REWRITES:` headers.
pub fn parse_annotation(response: &str, max_rewrites: usize) -> Result<(String, Vec<String>), String> {
    let a = analysis_re()
        .find(response)
        .ok_or("response has no ANALYSIS section")?;
    let r = rewrites_re()
        .find_iter(response)
        .find(|m| m.start() >= a.end())
        .ok_or("response has no REWRITES section after the analysis")?;
    let analysis = response[a.end()..r.start()].trim().to_string();
    if analysis.is_empty() {
        return Err("ANALYSIS section is empty".into());
    }
    let section = response[r.end()..].trim();
    if section.is_empty() {
        return Err("REWRITES section is empty".into());
    }
    let rewrites = parse_rewrites(section, max_rewrites);
    if rewrites.is_empty() {
        return Err("REWRITES section has no usable rewrite".into());
    }
    Ok((analysis, rewrites))
}

/// Renders the annotation prompt for one pair.
pub fn annotation_prompt(template: &PromptTemplate, pair: &QaPair) -> Result<String, ForgeError> {
    if !template.question.contains(ANSWER_SLOT) {
        return Err(ForgeError::Template(format!("question block lacks {ANSWER_SLOT}")));
    }
    assemble_prompt_with(template, &pair.question, &[(ANSWER_SLOT, &pair.answer)])
        .map_err(|e| ForgeError::Template(e.to_string()))
}

fn cache_key(template: &PromptTemplate, tag: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(template).unwrap_or_default());
    h.update([0]);
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

/// Keeps the analysis to what fits beside the question and rewrites.
fn truncate_analysis(pair: &mut SftPair, cutoff: usize, tokenizer: &dyn Tokenizer) {
    let fixed = tokenizer.count(&pair.question) + tokenizer.count(&format_numbered(&pair.rewrites));
    let room = cutoff.saturating_sub(fixed);
    if tokenizer.count(&pair.analysis) <= room {
        return;
    }
    let spans = token_spans(&pair.analysis);
    let (mut lo, mut hi) = (0usize, spans.len());
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if tokenizer.count(&pair.analysis[..spans[mid - 1].1]) <= room {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    pair.analysis = if lo == 0 {
        String::new()
    } else {
        pair.analysis[..spans[lo - 1].1].to_string()
    };
}

/// Asks the annotator for a step-by-step analysis and rewrites per pair.
///
/// Every input yields exactly one pair or one skip record.
pub fn annotate_sft(
    qa_pairs: &[QaPair],
    annotator: &dyn ChatModel,
    template: &PromptTemplate,
    opts: &AnnotateOptions,
    tokenizer: &dyn Tokenizer,
) -> Result<SftOutcome, ForgeError> {
    template
        .validate()
        .map_err(|e| ForgeError::Template(e.to_string()))?;
    let tag = annotator.tag();
    if let Some(dir) = &opts.cache_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let results = par_map(qa_pairs, opts.parallelism, |index, pair| -> Result<Result<SftPair, SftSkip>, ForgeError> {
        let skip = |reason: String| {
            Ok(Err(SftSkip {
                index,
                question: pair.question.clone(),
                reason,
            }))
        };
        if pair.question.trim().is_empty() || pair.answer.trim().is_empty() {
            return skip("question and answer must both be nonempty".into());
        }
        let prompt = annotation_prompt(template, pair)?;
        let cache_path = opts
            .cache_dir
            .as_ref()
            .map(|d| d.join(format!("{}.txt", cache_key(template, &tag, &prompt))));
        let cached = cache_path.as_ref().and_then(|p| fs::read_to_string(p).ok());
        let response = match cached {
            Some(r) => r,
            None => match complete_with_retries(annotator, &[ChatMessage::user(prompt)], opts.temperature, &opts.retry) {
                Ok((r, _)) => {
                    if let Some(p) = &cache_path {
                        fs::write(p, &r).map_err(io_err(p))?;
                    }
                    r
                }
                Err(e) => return skip(format!("annotator failed: {e}")),
            },
        };
        match parse_annotation(&response, opts.max_rewrites) {
            Ok((analysis, rewrites)) => {
                let mut sft = SftPair {
                    question: pair.question.trim().to_string(),
                    analysis,
                    rewrites,
                    annotator_tag: tag.clone(),
                };
                truncate_analysis(&mut sft, opts.sft_cutoff, tokenizer);
                Ok(Ok(sft))
            }
            Err(reason) => skip(reason),
        }
    });
    let mut outcome = SftOutcome::default();
    for r in results {
        match r? {
            Ok(p) => outcome.pairs.push(p),
            Err(s) => outcome.skips.push(s),
        }
    }
    Ok(outcome)
}

/// One supervised line in instruction/input/output form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl From<&SftPair> for SftRecord {
    fn from(p: &SftPair) -> Self {
        Self {
            instruction: SFT_INSTRUCTION.to_string(),
            input: p.question.clone(),
            output: format_numbered(&p.rewrites),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileSummary {
    pub file: String,
    pub count: usize,
    pub token_total: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cpt: Option<FileSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sft: Option<FileSummary>,
    /// Pairs with their analyses, for inspection.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sft_full: Option<FileSummary>,
    pub sft_instruction: String,
    /// Hyperparameters the samples were sized for; not used here.
    pub advisory_hyperparameters: BTreeMap<String, serde_json::Value>,
}

pub fn advisory_hyperparameters() -> BTreeMap<String, serde_json::Value> {
    use serde_json::json;
    BTreeMap::from([
        ("adapter".to_string(), json!("lora")),
        ("lora_alpha".to_string(), json!(16)),
        ("lora_rank".to_string(), json!(8)),
        ("lora_dropout".to_string(), json!(0.0)),
        ("optimizer".to_string(), json!("adamw")),
        ("max_grad_norm".to_string(), json!(1.0)),
        ("precision".to_string(), json!("bf16")),
        ("learning_rate".to_string(), json!(5e-5)),
        ("epochs".to_string(), json!(3)),
        ("cpt_batch_size".to_string(), json!(8)),
        ("sft_batch_size".to_string(), json!(2)),
        ("cpt_cutoff".to_string(), json!(DEFAULT_CPT_CUTOFF)),
        ("sft_cutoff".to_string(), json!(DEFAULT_SFT_CUTOFF)),
    ])
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<(usize, String), ForgeError> {
    let mut buf = Vec::new();
    let mut n = 0;
    for row in rows {
        serde_json::to_writer(&mut buf, &row).expect("serializable row");
        buf.push(b'\n');
        n += 1;
    }
    fs::write(path, &buf).map_err(io_err(path))?;
    Ok((n, hex::encode(Sha256::digest(&buf))))
}

/// Writes `cpt.jsonl` and/or `sft.jsonl` plus `sft_full.jsonl`, then
/// `manifest.json` describing whichever were given.
pub fn export_training_files(
    cpt: Option<&[CptSample]>,
    sft: Option<&[SftPair]>,
    out_dir: &Path,
    tokenizer: &dyn Tokenizer,
) -> Result<TrainingManifest, ForgeError> {
    #[derive(Serialize)]
    struct Text<'a> {
        text: &'a str,
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let cpt_summary = match cpt {
        Some(cpt) => {
            let (count, sha256) = write_jsonl(&out_dir.join("cpt.jsonl"), cpt.iter().map(|s| Text { text: &s.text }))?;
            Some(FileSummary {
                file: "cpt.jsonl".into(),
                count,
                token_total: cpt.iter().map(|s| s.token_count).sum(),
                sha256,
            })
        }
        None => None,
    };

    let (sft_summary, full_summary) = match sft {
        Some(sft) => {
            let records: Vec<SftRecord> = sft.iter().map(SftRecord::from).collect();
            let sft_tokens: usize = records
                .iter()
                .map(|r| tokenizer.count(&r.input) + tokenizer.count(&r.output))
                .sum();
            let (count, sha256) = write_jsonl(&out_dir.join("sft.jsonl"), records.iter())?;
            let summary = FileSummary {
                file: "sft.jsonl".into(),
                count,
                token_total: sft_tokens,
                sha256,
            };
            let full_tokens: usize = sft
                .iter()
                .map(|p| {
                    tokenizer.count(&p.question)
                        + tokenizer.count(&p.analysis)
                        + tokenizer.count(&format_numbered(&p.rewrites))
                })
                .sum();
            let (count, sha256) = write_jsonl(&out_dir.join("sft_full.jsonl"), sft.iter())?;
            let full = FileSummary {
                file: "sft_full.jsonl".into(),
                count,
                token_total: full_tokens,
                sha256,
            };
            (Some(summary), Some(full))
        }
        None => (None, None),
    };

    let manifest = TrainingManifest {
        cpt: cpt_summary,
        sft: sft_summary,
        sft_full: full_summary,
        sft_instruction: SFT_INSTRUCTION.to_string(),
        advisory_hyperparameters: advisory_hyperparameters(),
    };
    let path = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}
