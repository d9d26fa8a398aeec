//! Regex-driven extraction of exam items from question-bank text.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::IngestError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Labels(BTreeSet<String>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamItem {
    pub stem: String,
    #[serde(default)]
    pub options: BTreeMap<String, String>,
    pub answer: Answer,
    #[serde(default)]
    pub explanation: String,
}

impl ExamItem {
    /// Checks the item invariants: nonempty stem and answer labels that exist.
    pub fn validate(&self) -> Result<(), String> {
        if self.stem.trim().is_empty() {
            return Err("empty stem".into());
        }
        if !self.options.is_empty() {
            match &self.answer {
                Answer::Labels(labels) => {
                    if labels.is_empty() {
                        return Err("no answer label".into());
                    }
                    if let Some(bad) = labels.iter().find(|l| !self.options.contains_key(*l)) {
                        return Err(format!("answer label {bad} is not an option"));
                    }
                }
                Answer::Text(_) => return Err("multiple-choice item with free-text answer".into()),
            }
        }
        Ok(())
    }
}

/// A skipped segment, by 1-based inclusive line span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExamWarning {
    pub line_start: usize,
    pub line_end: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExamParse {
    pub items: Vec<ExamItem>,
    pub warnings: Vec<ExamWarning>,
}

/// The four markers that delimit an item.
#[derive(Debug, Clone)]
pub struct ExamProfile {
    pub name: String,
    /// Matches at the start of each item; must be multi-line anchored.
    item_start: Regex,
    /// Capture group 1 is the option label.
    option: Regex,
    answer: Regex,
    explanation: Regex,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExamPatterns {
    pub item_start: String,
    pub option: String,
    pub answer: String,
    pub explanation: String,
}

impl ExamProfile {
    pub fn from_patterns(name: &str, p: &ExamPatterns) -> Result<Self, IngestError> {
        let compile = |what: &str, pat: &str| {
            Regex::new(pat).map_err(|e| IngestError::Profile(format!("{name}.{what}: {e}")))
        };
        Ok(Self {
            name: name.to_string(),
            item_start: compile("item_start", &p.item_start)?,
            option: compile("option", &p.option)?,
            answer: compile("answer", &p.answer)?,
            explanation: compile("explanation", &p.explanation)?,
        })
    }

    /// Numbered items, `A)`/`A.`/`A、` options and English or Chinese markers.
    pub fn default_profile() -> Self {
        let patterns = ExamPatterns {
            item_start: r"(?m)^[ \t]*\d+[ \t]*[.．、)）][ \t]*".into(),
            option: r"(?:^|\s)[(（]?([A-H])[ \t]*[).．、:：）][ \t]*".into(),
            answer: r"(?i)(?:correct answer|answer|答案)[ \t]*[:：][ \t]*".into(),
            explanation: r"(?i)(?:explanation|解析)[ \t]*[:：][ \t]*".into(),
        };
        Self::from_patterns("default", &patterns).expect("builtin patterns compile")
    }
}

/// Named extraction profiles.
#[derive(Debug, Clone)]
pub struct ProfileRegistry {
    profiles: HashMap<String, ExamProfile>,
}

impl Default for ProfileRegistry {
    fn default() -> Self {
        let mut profiles = HashMap::new();
        profiles.insert("default".to_string(), ExamProfile::default_profile());
        Self { profiles }
    }
}

impl ProfileRegistry {
    pub fn insert(&mut self, profile: ExamProfile) {
        self.profiles.insert(profile.name.clone(), profile);
    }

    pub fn get(&self, name: &str) -> Result<&ExamProfile, IngestError> {
        self.profiles.get(name).ok_or_else(|| {
            let mut known: Vec<_> = self.profiles.keys().cloned().collect();
            known.sort();
            IngestError::Profile(format!(
                "unknown exam profile {name:?} (known: {})",
                known.join(", ")
            ))
        })
    }
}

/// Extracts items using a named profile from `registry`.
pub fn parse_exam_items(
    raw: &str,
    profile: &str,
    registry: &ProfileRegistry,
) -> Result<ExamParse, IngestError> {
    Ok(parse_with_profile(raw, registry.get(profile)?))
}

pub fn parse_with_profile(raw: &str, profile: &ExamProfile) -> ExamParse {
    let mut result = ExamParse::default();
    let starts: Vec<(usize, usize)> = profile
        .item_start
        .find_iter(raw)
        .map(|m| (m.start(), m.end()))
        .collect();

    let line_of = |byte: usize| raw[..byte].matches('\n').count() + 1;

    let preamble_end = starts.first().map_or(raw.len(), |s| s.0);
    if !raw[..preamble_end].trim().is_empty() {
        result.warnings.push(ExamWarning {
            line_start: 1,
            line_end: line_of(preamble_end.saturating_sub(1)),
            reason: "text before the first item".into(),
        });
    }

    for (i, &(seg_start, body_start)) in starts.iter().enumerate() {
        let seg_end = starts.get(i + 1).map_or(raw.len(), |s| s.0);
        let body = &raw[body_start..seg_end];
        match parse_item(body, profile) {
            Ok(item) => result.items.push(item),
            Err(reason) => {
                let last = raw[..seg_end].trim_end().len().max(seg_start + 1);
                result.warnings.push(ExamWarning {
                    line_start: line_of(seg_start),
                    line_end: line_of(last - 1),
                    reason,
                });
            }
        }
    }
    result
}

fn parse_item(body: &str, profile: &ExamProfile) -> Result<ExamItem, String> {
    let answer_at = profile
        .answer
        .find(body)
        .ok_or_else(|| "no answer marker".to_string())?;
    let head = &body[..answer_at.start()];
    let tail = &body[answer_at.end()..];
    let (answer_text, explanation) = match profile.explanation.find(tail) {
        Some(m) => (&tail[..m.start()], tail[m.end()..].trim()),
        None => (tail, ""),
    };

    // Options must run A, B, C, ... so stray capitals in the stem are ignored.
    let mut options = BTreeMap::new();
    let mut marks: Vec<(String, usize, usize)> = Vec::new();
    let mut expected = b'A';
    for caps in profile.option.captures_iter(head) {
        let label = caps.get(1).expect("option pattern has a label group");
        if label.as_str().as_bytes() == [expected] {
            marks.push((label.as_str().to_string(), caps.get(0).unwrap().start(), caps.get(0).unwrap().end()));
            expected += 1;
        }
    }
    let stem_end = marks.first().map_or(head.len(), |m| m.1);
    let stem = normalize_space(&head[..stem_end]);
    for (k, (label, _, text_start)) in marks.iter().enumerate() {
        let text_end = marks.get(k + 1).map_or(head.len(), |m| m.1);
        options.insert(label.clone(), normalize_space(&head[*text_start..text_end]));
    }

    let answer = if options.is_empty() {
        let text = answer_text.trim();
        if text.is_empty() {
            return Err("empty answer".into());
        }
        Answer::Text(text.to_string())
    } else {
        let first_line = answer_text.trim().lines().next().unwrap_or("");
        let labels: BTreeSet<String> = leading_labels(first_line);
        Answer::Labels(labels)
    };

    let item = ExamItem {
        stem,
        options,
        answer,
        explanation: explanation.to_string(),
    };
    item.validate()?;
    Ok(item)
}

fn leading_labels(s: &str) -> BTreeSet<String> {
    let mut labels = BTreeSet::new();
    for c in s.chars() {
        match c {
            'A'..='Z' => {
                labels.insert(c.to_string());
            }
            ' ' | '\t' | ',' | '，' | '、' | '/' | ';' | '；' => {}
            _ => break,
        }
    }
    labels
}

fn normalize_space(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
