use serde::{Deserialize, Serialize};

use super::tree::{heading_line, DocNode, TitleTree};
use super::IngestError;
use crate::tokenize::Tokenizer;

/// Smallest accepted token budget.
pub const MIN_BUDGET: usize = 32;

/// A retrieval / pretraining unit cut from one document.
///
/// Serialises to exactly the JSONL fields consumed downstream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub seq: usize,
    pub heading_path: Vec<(u8, String)>,
    pub text: String,
    /// Body tokens only; the re-emitted headings are not counted.
    pub token_count: usize,
}

/// How a chunk came to be, kept so the packing rules can be checked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChunkOrigin {
    /// The whole document fit in the budget.
    Whole,
    /// Consecutive sibling sections merged greedily.
    Siblings {
        unit_tokens: Vec<usize>,
        next_tokens: Option<usize>,
    },
    /// Paragraphs of one oversize leaf packed greedily.
    Paragraphs {
        paragraph_tokens: Vec<usize>,
        next_tokens: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TracedChunk {
    pub chunk: Chunk,
    pub origin: ChunkOrigin,
}

/// Splits a title tree into chunks of at most `budget` body tokens.
pub fn split_tree(
    tree: &TitleTree,
    budget: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<Chunk>, IngestError> {
    Ok(split_tree_traced(tree, budget, tokenizer)?
        .into_iter()
        .map(|t| t.chunk)
        .collect())
}

/// Like [`split_tree`] but also reports which rule produced each chunk.
pub fn split_tree_traced(
    tree: &TitleTree,
    budget: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<TracedChunk>, IngestError> {
    if budget < MIN_BUDGET {
        return Err(IngestError::Budget {
            budget,
            min: MIN_BUDGET,
        });
    }
    let mut splitter = Splitter {
        doc_id: &tree.doc_id,
        budget,
        tokenizer,
        out: Vec::new(),
    };
    let root = &tree.root;
    if root.token_count <= budget {
        let mut blocks = Vec::new();
        root.push_blocks(&mut blocks, false);
        splitter.emit(&[], blocks, root.token_count, ChunkOrigin::Whole);
    } else {
        splitter.descend(root, &mut Vec::new());
    }
    Ok(splitter.out)
}

enum Unit<'a> {
    Body(&'a str, usize),
    Section(&'a DocNode),
}

impl Unit<'_> {
    fn tokens(&self) -> usize {
        match self {
            Unit::Body(_, t) => *t,
            Unit::Section(n) => n.token_count,
        }
    }
}

struct Splitter<'a> {
    doc_id: &'a str,
    budget: usize,
    tokenizer: &'a dyn Tokenizer,
    out: Vec<TracedChunk>,
}

impl Splitter<'_> {
    fn descend(&mut self, node: &DocNode, path: &mut Vec<(u8, String)>) {
        let mut units = Vec::with_capacity(node.children.len() + 1);
        if !node.body.is_empty() {
            units.push(Unit::Body(&node.body, self.tokenizer.count(&node.body)));
        }
        units.extend(node.children.iter().map(Unit::Section));

        let mut i = 0;
        while i < units.len() {
            if units[i].tokens() <= self.budget {
                let mut j = i;
                let mut sum = 0;
                while j < units.len() && sum + units[j].tokens() <= self.budget {
                    sum += units[j].tokens();
                    j += 1;
                }
                let origin = ChunkOrigin::Siblings {
                    unit_tokens: units[i..j].iter().map(Unit::tokens).collect(),
                    next_tokens: units.get(j).map(Unit::tokens),
                };
                self.emit_group(&units[i..j], path, sum, origin);
                i = j;
            } else {
                match units[i] {
                    Unit::Body(body, _) => self.paragraphs(body, path),
                    Unit::Section(child) => {
                        path.push((child.level, child.title.clone()));
                        if child.is_leaf() {
                            self.paragraphs(&child.body, path);
                        } else {
                            self.descend(child, path);
                        }
                        path.pop();
                    }
                }
                i += 1;
            }
        }
    }

    fn emit_group(
        &mut self,
        group: &[Unit<'_>],
        path: &[(u8, String)],
        tokens: usize,
        origin: ChunkOrigin,
    ) {
        let mut blocks = Vec::new();
        // A lone section keeps its own heading in the path.
        if let [Unit::Section(node)] = group {
            let mut deeper = path.to_vec();
            deeper.push((node.level, node.title.clone()));
            node.push_blocks(&mut blocks, false);
            self.emit(&deeper, blocks, tokens, origin);
            return;
        }
        for unit in group {
            match unit {
                Unit::Body(b, _) => blocks.push((*b).to_string()),
                Unit::Section(node) => node.push_blocks(&mut blocks, true),
            }
        }
        self.emit(path, blocks, tokens, origin);
    }

    fn paragraphs(&mut self, body: &str, path: &[(u8, String)]) {
        let paras = split_paragraphs(body);
        let counts: Vec<usize> = paras.iter().map(|p| self.tokenizer.count(p)).collect();
        for (range, tokens) in pack_greedy(&counts, self.budget) {
            let origin = ChunkOrigin::Paragraphs {
                paragraph_tokens: counts[range.clone()].to_vec(),
                next_tokens: counts.get(range.end).copied(),
            };
            let blocks = paras[range].iter().map(|p| p.to_string()).collect();
            self.emit(path, blocks, tokens, origin);
        }
    }

    fn emit(&mut self, path: &[(u8, String)], blocks: Vec<String>, tokens: usize, origin: ChunkOrigin) {
        // Groups made only of headings carry no body text.
        let has_body = blocks
            .iter()
            .any(|b| !b.trim().is_empty() && !is_heading_block(b));
        if !has_body {
            return;
        }
        let mut parts: Vec<String> = path.iter().map(|(l, t)| heading_line(*l, t)).collect();
        parts.extend(blocks);
        let seq = self.out.len();
        self.out.push(TracedChunk {
            chunk: Chunk {
                chunk_id: format!("{}#{}", self.doc_id, seq),
                doc_id: self.doc_id.to_string(),
                seq,
                heading_path: path.to_vec(),
                text: parts.join("\n\n"),
                token_count: tokens,
            },
            origin,
        });
    }
}

fn is_heading_block(block: &str) -> bool {
    super::tree::scan_lines(block)
        .iter()
        .all(|l| matches!(l, super::tree::Line::Heading { .. }))
}

/// Blank-line delimited blocks, each trimmed of surrounding blank lines.
pub fn split_paragraphs(body: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0;
    let mut offset = 0;
    for line in body.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        if line.trim().is_empty() {
            if let Some(s) = start.take() {
                out.push(&body[s..end]);
            }
        } else {
            if start.is_none() {
                start = Some(line_start);
            }
            end = line_start + line.trim_end().len();
        }
    }
    if let Some(s) = start {
        out.push(&body[s..end]);
    }
    out
}

/// Greedy left-to-right packing of token counts under `budget`.
///
/// Each group starts with the next unplaced item and extends while the sum
/// stays within budget. An item larger than the budget forms its own group.
pub fn pack_greedy(counts: &[usize], budget: usize) -> Vec<(std::ops::Range<usize>, usize)> {
    let mut groups = Vec::new();
    let mut i = 0;
    while i < counts.len() {
        let mut sum = counts[i];
        let mut j = i + 1;
        if sum <= budget {
            while j < counts.len() && sum + counts[j] <= budget {
                sum += counts[j];
                j += 1;
            }
        }
        groups.push((i..j, sum));
        i = j;
    }
    groups
}
