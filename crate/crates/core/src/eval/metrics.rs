//! Deterministic answer metrics and the query-document discrepancy measure.

use std::collections::{BTreeSet, HashMap};

use regex::Regex;

use crate::embed::{EmbedClient, EmbedError};
use crate::ingest::exam::{Answer, ExamItem};
use crate::tokenize::is_cjk;

/// Recall weight of the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;
pub const BLEU_MAX_N: usize = 4;
pub const BLEU_SMOOTHING: &str = "add-one on n-gram orders with zero matches";

/// Lowercases, drops punctuation and splits on whitespace; CJK characters
/// become single tokens.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if is_cjk(c) {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            tokens.push(c.to_string());
        } else if c.is_whitespace() {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
        } else if c.is_alphanumeric() || c == '_' {
            word.push(c);
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

fn multiset(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Token-overlap precision, recall and F1 after normalization.
pub fn token_f1(prediction: &str, reference: &str) -> (f64, f64, f64) {
    let p = normalize_tokens(prediction);
    let r = normalize_tokens(reference);
    match (p.is_empty(), r.is_empty()) {
        (true, true) => return (1.0, 1.0, 1.0),
        (true, false) | (false, true) => return (0.0, 0.0, 0.0),
        _ => {}
    }
    let pm = multiset(&p);
    let rm = multiset(&r);
    let overlap: usize = pm.iter().map(|(t, n)| (*n).min(*rm.get(t).unwrap_or(&0))).sum();
    if overlap == 0 {
        return (0.0, 0.0, 0.0);
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / r.len() as f64;
    (precision, recall, 2.0 * precision * recall / (precision + recall))
}

/// Normalized exact match.
pub fn exact_match(prediction: &str, reference: &str) -> f64 {
    f64::from(u8::from(normalize_tokens(prediction) == normalize_tokens(reference)))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure over normalized tokens, `beta` = [`ROUGE_BETA`].
pub fn rouge_l(prediction: &str, reference: &str) -> f64 {
    let p = normalize_tokens(prediction);
    let r = normalize_tokens(reference);
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&p, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / p.len() as f64;
    let recall = lcs / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * precision * recall / (recall + b2 * precision)
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU with clipped n-gram precisions up to 4-grams, uniform
/// weights and a brevity penalty against the closest reference length.
///
/// An order with no matching n-gram uses `(0 + 1) / (total + 1)`.
pub fn bleu(prediction: &str, references: &[&str]) -> f64 {
    let pred = normalize_tokens(prediction);
    let refs: Vec<Vec<String>> = references.iter().map(|r| normalize_tokens(r)).collect();
    if pred.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=BLEU_MAX_N {
        let counts = ngrams(&pred, n);
        let total: usize = counts.values().sum();
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = counts
            .iter()
            .map(|(g, c)| (*c).min(*max_ref.get(g).unwrap_or(&0)))
            .sum();
        let p = if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln() / BLEU_MAX_N as f64;
    }
    let c = pred.len() as f64;
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| ((len as i64 - pred.len() as i64).abs(), len))
        .unwrap() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    (bp * log_sum.exp()).clamp(0.0, 1.0)
}

/// How option labels are pulled out of a reader's answer.
#[derive(Debug, Clone, Default)]
pub enum LabelExtractor {
    /// First run of tokens made only of option letters; uppercase runs are
    /// preferred over case-insensitive ones.
    #[default]
    FirstRun,
    /// Capture group 1 (or the whole match) holds the labels.
    Pattern(Regex),
}

impl LabelExtractor {
    pub fn pattern(re: &str) -> Result<Self, regex::Error> {
        Regex::new(re).map(Self::Pattern)
    }

    /// The predicted label set, or `None` if nothing could be extracted.
    pub fn extract(&self, text: &str, item: &ExamItem) -> Option<BTreeSet<String>> {
        let letters: BTreeSet<char> = item
            .options
            .keys()
            .filter_map(|k| {
                let mut cs = k.chars();
                match (cs.next(), cs.next()) {
                    (Some(c), None) => Some(c.to_ascii_uppercase()),
                    _ => None,
                }
            })
            .collect();
        if letters.is_empty() {
            return None;
        }
        match self {
            LabelExtractor::FirstRun => {
                first_run(text, &letters, false).or_else(|| first_run(text, &letters, true))
            }
            LabelExtractor::Pattern(re) => {
                let caps = re.captures(text)?;
                let s = caps.get(1).or_else(|| caps.get(0))?.as_str();
                let set: BTreeSet<String> = s
                    .chars()
                    .map(|c| c.to_ascii_uppercase())
                    .filter(|c| letters.contains(c))
                    .map(String::from)
                    .collect();
                (!set.is_empty()).then_some(set)
            }
        }
    }
}

fn first_run(text: &str, letters: &BTreeSet<char>, any_case: bool) -> Option<BTreeSet<String>> {
    let is_label_token = |tok: &str| {
        !tok.is_empty()
            && tok.chars().all(|c| {
                let ok_case = any_case || c.is_ascii_uppercase();
                ok_case && letters.contains(&c.to_ascii_uppercase())
            })
    };
    let tokens = crate::tokenize::token_spans(text);
    let mut run: Option<BTreeSet<String>> = None;
    for (s, e) in tokens {
        let tok = &text[s..e];
        if is_label_token(tok) {
            run.get_or_insert_with(BTreeSet::new)
                .extend(tok.chars().map(|c| c.to_ascii_uppercase().to_string()));
        } else if run.is_some() {
            break;
        }
    }
    run
}

/// Multiple-choice outcome for one answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McScore {
    pub correct: bool,
    pub extracted: Option<BTreeSet<String>>,
}

impl McScore {
    pub fn value(&self) -> f64 {
        f64::from(u8::from(self.correct))
    }
}

/// 1 iff the extracted label set equals the item's answer set exactly.
pub fn mc_score(predicted_text: &str, item: &ExamItem, extractor: &LabelExtractor) -> McScore {
    let extracted = extractor.extract(predicted_text, item);
    let correct = match (&extracted, &item.answer) {
        (Some(got), Answer::Labels(want)) => got == want,
        _ => false,
    };
    McScore { correct, extracted }
}

pub fn mc_accuracy(predicted_text: &str, item: &ExamItem) -> f64 {
    mc_score(predicted_text, item, &LabelExtractor::FirstRun).value()
}

/// `1 - cosine`, clamped to [0, 1].
pub fn discrepancy_from_cosine(cos: f64) -> f64 {
    (1.0 - cos).clamp(0.0, 1.0)
}

pub fn discrepancy(query: &str, doc_text: &str, client: &EmbedClient) -> Result<f64, EmbedError> {
    let batch = client.embed_batch(&[query.to_string(), doc_text.to_string()])?;
    Ok(discrepancy_from_cosine(batch.vectors[0].cosine(&batch.vectors[1])))
}

/// One query before rewriting, its rewrites, and the target document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscrepancyCase {
    pub query: String,
    pub rewrites: Vec<String>,
    pub doc_text: String,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscrepancySummary {
    pub pairs: usize,
    pub before_mean: f64,
    /// Per case, the best (lowest) discrepancy among its rewrites.
    pub after_mean: f64,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    pub aggregation: String,
}

/// Mean discrepancy before and after rewriting over a set of cases.
pub fn discrepancy_batch(cases: &[DiscrepancyCase], client: &EmbedClient) -> Result<DiscrepancySummary, EmbedError> {
    let mut before = Vec::with_capacity(cases.len());
    let mut after = Vec::with_capacity(cases.len());
    for case in cases {
        let mut texts = vec![case.doc_text.clone(), case.query.clone()];
        texts.extend(case.rewrites.iter().cloned());
        let v = client.embed_batch(&texts)?.vectors;
        let b = discrepancy_from_cosine(v[1].cosine(&v[0]));
        let a = v[2..]
            .iter()
            .map(|r| discrepancy_from_cosine(r.cosine(&v[0])))
            .fold(b, f64::min);
        let a = if case.rewrites.is_empty() { b } else { a };
        before.push(b);
        after.push(a);
    }
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    Ok(DiscrepancySummary {
        pairs: cases.len(),
        before_mean: mean(&before),
        after_mean: mean(&after),
        before,
        after,
        aggregation: "mean".into(),
    })
}
