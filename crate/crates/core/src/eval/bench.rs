//! Batch evaluation of a pipeline over a dataset, optionally sweeping k.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{
    bleu, discrepancy_from_cosine, exact_match, mc_score, rouge_l, token_f1, LabelExtractor, BLEU_SMOOTHING,
    ROUGE_BETA,
};
use crate::ingest::exam::{Answer, ExamItem};
use crate::par::par_map;
use crate::pipeline::{Mode, Pipeline, RagAnswer};

/// One evaluation example: a question with either option labels or free text
/// as its gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub example_id: String,
    #[serde(alias = "stem")]
    pub question: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub options: BTreeMap<String, String>,
    pub answer: Answer,
    /// Chunk id of the document that answers the question, when annotated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_chunk: Option<String>,
}

impl EvalExample {
    pub fn is_multiple_choice(&self) -> bool {
        !self.options.is_empty()
    }

    /// Reads a free-text answer such as `"AB"` or `"A, B"` on a
    /// multiple-choice item as a label set, and checks labels exist.
    pub fn normalized(mut self) -> Result<Self, EvalError> {
        if self.is_multiple_choice() {
            if let Answer::Text(t) = &self.answer {
                let labels: BTreeSet<String> = t
                    .chars()
                    .filter(|c| !c.is_whitespace() && !matches!(c, ',' | ';' | '、' | '，'))
                    .map(|c| c.to_ascii_uppercase().to_string())
                    .collect();
                self.answer = Answer::Labels(labels);
            }
        }
        self.exam_item()
            .validate()
            .map_err(|e| EvalError::Metric(format!("example {}: {e}", self.example_id)))?;
        Ok(self)
    }

    /// The question as sent to the pipeline, options appended one per line.
    pub fn query_text(&self) -> String {
        let mut q = self.question.trim().to_string();
        for (label, text) in &self.options {
            q.push('\n');
            q.push_str(&format!("{label}. {}", text.trim()));
        }
        q
    }

    fn exam_item(&self) -> ExamItem {
        ExamItem {
            stem: self.question.clone(),
            options: self.options.clone(),
            answer: self.answer.clone(),
            explanation: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    /// Label-set accuracy on multiple choice; normalized exact match on text.
    #[serde(rename = "acc")]
    Acc,
    #[serde(rename = "f1")]
    F1,
    #[serde(rename = "rougeL")]
    RougeL,
    #[serde(rename = "bleu")]
    Bleu,
    /// Query-document discrepancy before and after rewriting.
    #[serde(rename = "disc")]
    Discrepancy,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Acc => "acc",
            Metric::F1 => "f1",
            Metric::RougeL => "rougeL",
            Metric::Bleu => "bleu",
            Metric::Discrepancy => "disc",
        }
    }

    /// Parses a comma separated list such as `acc,f1,rougeL,bleu`.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>, EvalError> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m = match part {
                "acc" => Metric::Acc,
                "f1" => Metric::F1,
                "rougeL" | "rouge_l" | "rouge-l" => Metric::RougeL,
                "bleu" => Metric::Bleu,
                "disc" | "discrepancy" => Metric::Discrepancy,
                other => return Err(EvalError::Metric(format!("unknown metric {other:?}"))),
            };
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(EvalError::Metric("no metrics selected".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{0}")]
    Metric(String),
    #[error("duplicate example id {0}")]
    DuplicateId(String),
    #[error("k values must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub example_id: String,
    pub values: BTreeMap<String, f64>,
    pub retrieved: usize,
    /// e.g. `no_label_extracted`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    pub answer_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedExample {
    pub example_id: String,
    pub stage: String,
    pub error: String,
    pub transport: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run_id: String,
    pub k: usize,
    pub mode: Mode,
    pub per_example: Vec<ExampleResult>,
    pub failed: Vec<FailedExample>,
    pub aggregates: BTreeMap<String, f64>,
    pub mean_retrieved: f64,
    pub config_snapshot: serde_json::Value,
    /// How each metric was computed.
    pub metric_notes: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn failure_count(&self) -> usize {
        self.failed.len()
    }

    /// Recomputes each aggregate from the per-example values.
    pub fn check_means(&self, tol: f64) -> bool {
        self.aggregates.iter().all(|(name, agg)| {
            let vals: Vec<f64> = self.per_example.iter().filter_map(|e| e.values.get(name).copied()).collect();
            !vals.is_empty() && (vals.iter().sum::<f64>() / vals.len() as f64 - agg).abs() <= tol
        })
    }
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub mode: Mode,
    pub metrics: Vec<Metric>,
    /// One report per entry.
    pub ks: Vec<usize>,
    pub parallelism: usize,
    pub extractor: LabelExtractor,
    pub config_snapshot: serde_json::Value,
}

fn check_applicable(dataset: &[EvalExample], metrics: &[Metric]) -> Result<(), EvalError> {
    for ex in dataset {
        let mc = ex.is_multiple_choice();
        for m in metrics {
            let ok = match m {
                Metric::Acc | Metric::Discrepancy => true,
                Metric::F1 | Metric::RougeL | Metric::Bleu => !mc,
            };
            if !ok {
                return Err(EvalError::Metric(format!(
                    "metric {} needs free-text answers but example {} is multiple choice",
                    m.name(),
                    ex.example_id
                )));
            }
        }
        if !mc && matches!(ex.answer, Answer::Labels(_)) {
            return Err(EvalError::Metric(format!(
                "example {} has answer labels but no options",
                ex.example_id
            )));
        }
    }
    Ok(())
}

fn dataset_digest(dataset: &[EvalExample]) -> String {
    let mut h = Sha256::new();
    for ex in dataset {
        h.update(serde_json::to_vec(ex).expect("serializable example"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn run_id(digest: &str, settings: &EvalSettings, k: usize) -> String {
    let mut h = Sha256::new();
    h.update(digest.as_bytes());
    h.update(settings.config_snapshot.to_string().as_bytes());
    h.update(settings.mode.to_string().as_bytes());
    for m in &settings.metrics {
        h.update(m.name().as_bytes());
    }
    h.update(k.to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

fn metric_notes(metrics: &[Metric], dataset: &[EvalExample]) -> BTreeMap<String, String> {
    let mut notes = BTreeMap::new();
    for m in metrics {
        let note = match m {
            Metric::Acc => {
                if dataset.iter().all(EvalExample::is_multiple_choice) {
                    "exact label-set match".to_string()
                } else {
                    "label-set match on multiple choice; normalized exact match on free text".to_string()
                }
            }
            Metric::F1 => "token overlap F1 after lowercasing and punctuation removal".into(),
            Metric::RougeL => format!("LCS F-measure, beta {ROUGE_BETA}"),
            Metric::Bleu => format!("sentence BLEU to 4-grams, {BLEU_SMOOTHING}"),
            Metric::Discrepancy => {
                "1 - cosine to the gold chunk, else the top retrieved chunk; disc_after takes the best rewrite; mean over examples".into()
            }
        };
        notes.insert(m.name().to_string(), note);
    }
    notes
}

fn score(
    ex: &EvalExample,
    ans: &RagAnswer,
    pipeline: &Pipeline,
    settings: &EvalSettings,
) -> Result<ExampleResult, FailedExample> {
    let mut values = BTreeMap::new();
    let mut flags = Vec::new();
    let text_answer = match &ex.answer {
        Answer::Text(t) => Some(t.as_str()),
        Answer::Labels(_) => None,
    };
    for m in &settings.metrics {
        match m {
            Metric::Acc => {
                let v = if ex.is_multiple_choice() {
                    let s = mc_score(&ans.answer_text, &ex.exam_item(), &settings.extractor);
                    if s.extracted.is_none() {
                        flags.push("no_label_extracted".to_string());
                    }
                    s.value()
                } else {
                    exact_match(&ans.answer_text, text_answer.unwrap_or(""))
                };
                values.insert("acc".to_string(), v);
            }
            Metric::F1 => {
                values.insert("f1".into(), token_f1(&ans.answer_text, text_answer.unwrap_or("")).2);
            }
            Metric::RougeL => {
                values.insert("rougeL".into(), rouge_l(&ans.answer_text, text_answer.unwrap_or("")));
            }
            Metric::Bleu => {
                values.insert("bleu".into(), bleu(&ans.answer_text, &[text_answer.unwrap_or("")]));
            }
            Metric::Discrepancy => {
                let target = ex
                    .gold_chunk
                    .clone()
                    .or_else(|| ans.retrieved.first().map(|d| d.chunk_id.clone()));
                let Some(target) = target else {
                    flags.push("no_discrepancy_target".to_string());
                    continue;
                };
                let fail = |stage: &str, error: String| FailedExample {
                    example_id: ex.example_id.clone(),
                    stage: stage.to_string(),
                    error,
                    transport: false,
                };
                let doc = pipeline
                    .chunk_texts
                    .get(&target)
                    .ok_or_else(|| fail("eval", format!("unknown chunk {target}")))?;
                let embedder = pipeline
                    .embedder
                    .as_ref()
                    .ok_or_else(|| fail("eval", "discrepancy needs an embedder".into()))?;
                let mut texts = vec![doc.clone(), ex.question.clone()];
                texts.extend(ans.rewrites.rewrites.iter().cloned());
                let v = embedder.embed_batch(&texts).map_err(|e| FailedExample {
                    example_id: ex.example_id.clone(),
                    stage: "embed".into(),
                    transport: e.is_retryable(),
                    error: e.to_string(),
                })?;
                let v = v.vectors;
                let before = discrepancy_from_cosine(v[1].cosine(&v[0]));
                let after = v[2..]
                    .iter()
                    .map(|r| discrepancy_from_cosine(r.cosine(&v[0])))
                    .fold(before, f64::min);
                values.insert("disc_before".into(), before);
                values.insert("disc_after".into(), after);
                if ex.gold_chunk.is_none() {
                    flags.push("discrepancy_vs_top_retrieved".to_string());
                }
            }
        }
    }
    Ok(ExampleResult {
        example_id: ex.example_id.clone(),
        values,
        retrieved: ans.retrieved.len(),
        flags,
        answer_text: ans.answer_text.clone(),
    })
}

/// Runs the pipeline on every example for each k and scores the answers.
///
/// Failed examples are listed and left out of the aggregates. Per-example
/// results are ordered by example id.
pub fn run_eval(
    dataset: &[EvalExample],
    pipeline: &Pipeline,
    settings: &EvalSettings,
) -> Result<Vec<MetricReport>, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if settings.metrics.is_empty() {
        return Err(EvalError::Metric("no metrics selected".into()));
    }
    if settings.ks.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    let mut ids = BTreeSet::new();
    for ex in dataset {
        if !ids.insert(&ex.example_id) {
            return Err(EvalError::DuplicateId(ex.example_id.clone()));
        }
    }
    check_applicable(dataset, &settings.metrics)?;

    let mut ordered: Vec<&EvalExample> = dataset.iter().collect();
    ordered.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let digest = dataset_digest(dataset);
    let ks = if settings.ks.is_empty() {
        vec![pipeline.settings.k]
    } else {
        settings.ks.clone()
    };

    let mut reports = Vec::with_capacity(ks.len());
    for k in ks {
        let outcomes = par_map(&ordered, settings.parallelism, |_, ex| {
            pipeline
                .answer_with_k(&ex.query_text(), k, settings.mode)
                .map_err(|e| FailedExample {
                    example_id: ex.example_id.clone(),
                    stage: e.stage.to_string(),
                    error: e.message.clone(),
                    transport: e.transport,
                })
                .and_then(|ans| score(ex, &ans, pipeline, settings))
        });
        let mut per_example = Vec::new();
        let mut failed = Vec::new();
        for o in outcomes {
            match o {
                Ok(r) => per_example.push(r),
                Err(f) => failed.push(f),
            }
        }
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in &per_example {
            for (name, v) in &r.values {
                let e = sums.entry(name.clone()).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        let aggregates = sums.into_iter().map(|(n, (s, c))| (n, s / c as f64)).collect();
        let mean_retrieved = if per_example.is_empty() {
            0.0
        } else {
            per_example.iter().map(|r| r.retrieved as f64).sum::<f64>() / per_example.len() as f64
        };
        reports.push(MetricReport {
            run_id: run_id(&digest, settings, k),
            k,
            mode: settings.mode,
            per_example,
            failed,
            aggregates,
            mean_retrieved,
            config_snapshot: settings.config_snapshot.clone(),
            metric_notes: metric_notes(&settings.metrics, dataset),
        });
    }
    Ok(reports)
}

/// Header and rows for a k-sweep table: k, counts, mean retrieved, then one
/// column per aggregate.
pub fn sweep_table(reports: &[MetricReport]) -> (Vec<String>, Vec<Vec<String>>) {
    let names: BTreeSet<&String> = reports.iter().flat_map(|r| r.aggregates.keys()).collect();
    let mut header: Vec<String> = ["k", "mode", "scored", "failed", "mean_retrieved"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(names.iter().map(|n| n.to_string()));
    let rows = reports
        .iter()
        .map(|r| {
            let mut row = vec![
                r.k.to_string(),
                r.mode.to_string(),
                r.per_example.len().to_string(),
                r.failed.len().to_string(),
                format!("{:.6}", r.mean_retrieved),
            ];
            row.extend(
                names
                    .iter()
                    .map(|n| r.aggregates.get(*n).map(|v| format!("{v:.6}")).unwrap_or_default()),
            );
            row
        })
        .collect();
    (header, rows)
}

/// Parses `1..8` (inclusive) or a comma list such as `2,4,6`.
pub fn parse_k_list(s: &str) -> Result<Vec<usize>, EvalError> {
    let bad = || EvalError::Metric(format!("cannot read k values from {s:?}; use 1..8 or 2,4,6"));
    let ks: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if ks.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    Ok(ks)
}
