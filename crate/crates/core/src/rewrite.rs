//! Query rewriting: instruction + demonstrations + question prompts, an LLM
//! call, and a forgiving parser that turns the response into a rewrite set.

use std::collections::HashSet;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::provider::{complete_with_retries, ChatMessage, ChatModel, ProviderError, RetryPolicy};

/// Placeholder replaced by the user question.
pub const QUESTION_SLOT: &str = "{question}";

pub const DEFAULT_MAX_REWRITES: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum RewriteError {
    #[error("template: {0}")]
    Template(String),
    #[error("query is empty")]
    EmptyQuery,
    #[error("rewriting {query:?} failed: {source}")]
    Transport {
        query: String,
        #[source]
        source: ProviderError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demonstration {
    pub input: String,
    pub reasoning: String,
    pub output: String,
}

/// Instruction, demonstrations and a question block holding [`QUESTION_SLOT`].
///
/// Construct through [`PromptTemplate::new`] or [`PromptTemplate::from_toml`]
/// so the slot is validated up front.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    #[serde(default)]
    pub name: String,
    pub instruction: String,
    #[serde(default)]
    pub demonstrations: Vec<Demonstration>,
    #[serde(default = "default_question_block")]
    pub question: String,
    #[serde(default)]
    pub zero_shot: bool,
    /// Instruction given to the reader model alongside retrieved documents.
    #[serde(default)]
    pub reader_instruction: Option<String>,
}

fn default_question_block() -> String {
    QUESTION_SLOT.to_string()
}

impl PromptTemplate {
    pub fn new(
        instruction: impl Into<String>,
        demonstrations: Vec<Demonstration>,
        question: impl Into<String>,
        zero_shot: bool,
    ) -> Result<Self, RewriteError> {
        let t = Self {
            name: String::new(),
            instruction: instruction.into(),
            demonstrations,
            question: question.into(),
            zero_shot,
            reader_instruction: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_toml(text: &str) -> Result<Self, RewriteError> {
        let t: Self = toml::from_str(text).map_err(|e| RewriteError::Template(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, RewriteError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RewriteError::Template(format!("{}: {e}", path.display())))?;
        let mut t = Self::from_toml(&text)
            .map_err(|e| RewriteError::Template(format!("{}: {e}", path.display())))?;
        if t.name.is_empty() {
            t.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), RewriteError> {
        let in_question = self.question.matches(QUESTION_SLOT).count();
        let elsewhere = self.instruction.matches(QUESTION_SLOT).count()
            + self
                .demonstrations
                .iter()
                .map(|d| {
                    d.input.matches(QUESTION_SLOT).count()
                        + d.reasoning.matches(QUESTION_SLOT).count()
                        + d.output.matches(QUESTION_SLOT).count()
                })
                .sum::<usize>();
        if in_question != 1 || elsewhere != 0 {
            return Err(RewriteError::Template(format!(
                "expected exactly one {QUESTION_SLOT} slot in the question block, found {in_question} there and {elsewhere} elsewhere"
            )));
        }
        if self.demonstrations.is_empty() && !self.zero_shot {
            return Err(RewriteError::Template(
                "no demonstrations; set zero_shot = true to allow this".into(),
            ));
        }
        Ok(())
    }
}

fn render_demo(d: &Demonstration) -> String {
    format!(
        "Example input: {}\nReasoning: {}\nExample output:\n{}",
        d.input.trim(),
        d.reasoning.trim(),
        d.output.trim()
    )
}

/// Renders the full rewriting prompt for `q`.
///
/// Blocks are separated by a blank line: the instruction, each
/// demonstration in order, then the question block with `q` substituted.
pub fn assemble_prompt(template: &PromptTemplate, q: &str) -> Result<String, RewriteError> {
    assemble_prompt_with(template, q, &[])
}

/// Like [`assemble_prompt`], additionally filling named slots such as
/// `{answer}` in the question block. The query itself is never rescanned.
pub fn assemble_prompt_with(
    template: &PromptTemplate,
    q: &str,
    slots: &[(&str, &str)],
) -> Result<String, RewriteError> {
    if q.trim().is_empty() {
        return Err(RewriteError::EmptyQuery);
    }
    let mut blocks = vec![template.instruction.trim().to_string()];
    blocks.extend(template.demonstrations.iter().map(render_demo));
    // Single substitution: a question that itself contains the marker stays verbatim.
    let (before, after) = template
        .question
        .split_once(QUESTION_SLOT)
        .ok_or_else(|| RewriteError::Template(format!("question block lacks {QUESTION_SLOT}")))?;
    let fill = |text: &str| {
        slots
            .iter()
            .fold(text.to_string(), |acc, (slot, value)| acc.replace(slot, value))
    };
    blocks.push(format!("{}{q}{}", fill(before), fill(after)));
    Ok(blocks.join("\n\n"))
}

/// Rewrites for one query, with the raw response kept for auditing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteSet {
    pub original: String,
    pub rewrites: Vec<String>,
    pub raw_response: String,
    /// True when nothing usable was parsed and the original query stands in.
    pub fallback: bool,
}

impl RewriteSet {
    /// The query itself as the only rewrite.
    pub fn identity(q: &str) -> Self {
        Self {
            original: q.to_string(),
            rewrites: vec![q.to_string()],
            raw_response: String::new(),
            fallback: false,
        }
    }
}

fn numbered_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:\(?\d{1,3}[.)）、:：]|\(\d{1,3}\))\s*(.+?)\s*$").unwrap())
}

fn bullet_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*[-*•+]\s+(.+?)\s*$").unwrap())
}

fn output_marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)^\s*(?:example output|output|rewrites|rewritten quer(?:y|ies))\s*[:：]").unwrap()
    })
}

fn clean(s: &str) -> String {
    let s = s.trim();
    let s = s
        .strip_prefix(['"', '“', '\''])
        .and_then(|x| x.strip_suffix(['"', '”', '\'']))
        .unwrap_or(s);
    s.trim().to_string()
}

fn dedup_key(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Parses an LLM response into rewrites.
///
/// Only text after the last `Output:`-style marker is considered, if one is
/// present. Precedence: numbered list, then bulleted list, then a split on
/// semicolons and newlines, then the whole text. Results are de-duplicated
/// ignoring case and whitespace, keeping first occurrences, and capped at
/// `max`. Candidates without any letter or digit are dropped.
pub fn parse_rewrites(response: &str, max: usize) -> Vec<String> {
    let body = match output_marker_re().find_iter(response).last() {
        Some(m) => &response[m.end()..],
        None => response,
    };
    let lines: Vec<&str> = body.lines().collect();
    let capture = |re: &Regex| -> Vec<String> {
        lines
            .iter()
            .filter_map(|l| re.captures(l).map(|c| clean(&c[1])))
            .collect()
    };
    let mut candidates = capture(numbered_re());
    if candidates.is_empty() {
        candidates = capture(bullet_re());
    }
    if candidates.is_empty() {
        candidates = body.split([';', '；', '\n']).map(clean).collect();
    }
    if candidates.iter().all(|c| c.is_empty()) {
        candidates = vec![clean(body)];
    }

    let mut seen = HashSet::new();
    candidates
        .into_iter()
        .filter(|c| c.chars().any(char::is_alphanumeric))
        .filter(|c| seen.insert(dedup_key(c)))
        .take(max)
        .collect()
}

/// Formats rewrites the way [`parse_rewrites`] reads most reliably.
pub fn format_numbered(rewrites: &[String]) -> String {
    rewrites
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{}. {}", i + 1, r))
        .collect::<Vec<_>>()
        .join("\n")
}

/// A configured rewriting model.
#[derive(Clone)]
pub struct Rewriter {
    pub template: PromptTemplate,
    pub model: Arc<dyn ChatModel>,
    pub max_rewrites: usize,
    pub temperature: f32,
    pub retry: RetryPolicy,
}

impl Rewriter {
    pub fn new(template: PromptTemplate, model: Arc<dyn ChatModel>) -> Self {
        Self {
            template,
            model,
            max_rewrites: DEFAULT_MAX_REWRITES,
            temperature: 0.0,
            retry: RetryPolicy::default(),
        }
    }

    pub fn rewrite(&self, q: &str) -> Result<RewriteSet, RewriteError> {
        rewrite(q, &self.template, self.model.as_ref(), self.max_rewrites, self.temperature, &self.retry)
    }
}

/// Rewrites `q`; never returns an empty set.
pub fn rewrite(
    q: &str,
    template: &PromptTemplate,
    llm: &dyn ChatModel,
    max_rewrites: usize,
    temperature: f32,
    retry: &RetryPolicy,
) -> Result<RewriteSet, RewriteError> {
    let prompt = assemble_prompt(template, q)?;
    let (raw, _) = complete_with_retries(llm, &[ChatMessage::user(prompt)], temperature, retry)
        .map_err(|source| RewriteError::Transport {
            query: q.to_string(),
            source,
        })?;
    let rewrites = parse_rewrites(&raw, max_rewrites.max(1));
    Ok(if rewrites.is_empty() {
        RewriteSet {
            original: q.to_string(),
            rewrites: vec![q.to_string()],
            raw_response: raw,
            fallback: true,
        }
    } else {
        RewriteSet {
            original: q.to_string(),
            rewrites,
            raw_response: raw,
            fallback: false,
        }
    })
}
