use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::tokenize::Tokenizer;

/// One section of a document: a heading plus the text directly under it.
///
/// The synthetic root has level 0 and an empty title; its body is whatever
/// precedes the first heading.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocNode {
    pub title: String,
    pub level: u8,
    pub body: String,
    pub children: Vec<DocNode>,
    /// Tokens of `body` plus all descendants. Headings are not counted.
    pub token_count: usize,
}

/// A parsed document: its id and the synthetic root of its title tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TitleTree {
    pub doc_id: String,
    pub root: DocNode,
}

impl DocNode {
    fn new(title: String, level: u8) -> Self {
        Self {
            title,
            level,
            body: String::new(),
            children: Vec::new(),
            token_count: 0,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Headings of this subtree in depth-first order, excluding the root itself.
    pub fn flatten_headings(&self) -> Vec<(u8, String)> {
        let mut out = Vec::new();
        fn walk(node: &DocNode, out: &mut Vec<(u8, String)>) {
            for child in &node.children {
                out.push((child.level, child.title.clone()));
                walk(child, out);
            }
        }
        walk(self, &mut out);
        out
    }

    /// Renders the node as markdown, heading first (unless this is the root).
    pub fn to_markdown(&self) -> String {
        let mut blocks = Vec::new();
        self.push_blocks(&mut blocks, true);
        blocks.join("\n\n")
    }

    pub(crate) fn push_blocks(&self, blocks: &mut Vec<String>, with_heading: bool) {
        if with_heading && self.level > 0 {
            blocks.push(heading_line(self.level, &self.title));
        }
        if !self.body.is_empty() {
            blocks.push(self.body.clone());
        }
        for child in &self.children {
            child.push_blocks(blocks, true);
        }
    }

    fn recount(&mut self, tokenizer: &dyn Tokenizer) -> usize {
        let own = tokenizer.count(&self.body);
        let below: usize = self.children.iter_mut().map(|c| c.recount(tokenizer)).sum();
        self.token_count = own + below;
        self.token_count
    }
}

pub(crate) fn heading_line(level: u8, title: &str) -> String {
    let hashes = "#".repeat(level as usize);
    if title.is_empty() {
        hashes
    } else {
        format!("{hashes} {title}")
    }
}

/// A classified markdown line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Line<'a> {
    Heading { level: u8, title: &'a str },
    Text(&'a str),
}

/// Splits markdown into lines, recognising ATX headings outside fenced code.
pub(crate) fn scan_lines(text: &str) -> Vec<Line<'_>> {
    let mut out = Vec::new();
    let mut fence: Option<(char, usize)> = None;
    for raw in text.lines() {
        let trimmed = raw.trim_start();
        let indent = raw.len() - trimmed.len();
        if indent < 4 {
            if let Some(marker) = fence_marker(trimmed) {
                match fence {
                    None => fence = Some(marker),
                    Some((c, len)) if marker.0 == c && marker.1 >= len => fence = None,
                    Some(_) => {}
                }
                out.push(Line::Text(raw));
                continue;
            }
        }
        if fence.is_none() && indent < 4 {
            if let Some((level, title)) = parse_heading(trimmed) {
                out.push(Line::Heading { level, title });
                continue;
            }
        }
        out.push(Line::Text(raw));
    }
    out
}

fn fence_marker(line: &str) -> Option<(char, usize)> {
    let c = line.chars().next()?;
    if c != '`' && c != '~' {
        return None;
    }
    let len = line.chars().take_while(|&x| x == c).count();
    (len >= 3).then_some((c, len))
}

fn parse_heading(line: &str) -> Option<(u8, &str)> {
    let hashes = line.bytes().take_while(|&b| b == b'#').count();
    if hashes == 0 || hashes > 6 {
        return None;
    }
    let rest = &line[hashes..];
    if !rest.is_empty() && !rest.starts_with([' ', '\t']) {
        return None;
    }
    let mut title = rest.trim();
    // optional closing sequence: "## Title ##"
    let stripped = title.trim_end_matches('#');
    if stripped.len() != title.len() && (stripped.is_empty() || stripped.ends_with([' ', '\t'])) {
        title = stripped.trim_end();
    }
    Some((hashes as u8, title))
}

/// Drops leading and trailing blank lines.
pub(crate) fn trim_blank_lines(lines: &[&str]) -> String {
    let start = lines.iter().position(|l| !l.trim().is_empty());
    let end = lines.iter().rposition(|l| !l.trim().is_empty());
    match (start, end) {
        (Some(s), Some(e)) => lines[s..=e]
            .iter()
            .map(|l| l.trim_end())
            .collect::<Vec<_>>()
            .join("\n"),
        _ => String::new(),
    }
}

/// Parses raw bytes into a title tree.
///
/// Rejects invalid UTF-8 and NUL bytes, reporting the offending byte offset.
pub fn build_title_tree(
    markdown: &[u8],
    doc_id: &str,
    tokenizer: &dyn Tokenizer,
) -> Result<TitleTree, IngestError> {
    let text = std::str::from_utf8(markdown).map_err(|e| IngestError::Decode {
        doc_id: doc_id.to_string(),
        offset: e.valid_up_to(),
    })?;
    if let Some(offset) = text.bytes().position(|b| b == 0) {
        return Err(IngestError::Decode {
            doc_id: doc_id.to_string(),
            offset,
        });
    }
    Ok(build_title_tree_str(text, doc_id, tokenizer))
}

/// Builds the tree from already-decoded text.
///
/// Headings that skip levels attach to the nearest shallower heading.
pub fn build_title_tree_str(text: &str, doc_id: &str, tokenizer: &dyn Tokenizer) -> TitleTree {
    // Arena of (node, pending body lines); stack holds arena indices of open nodes.
    let mut arena: Vec<(DocNode, Vec<&str>, Vec<usize>)> =
        vec![(DocNode::new(String::new(), 0), Vec::new(), Vec::new())];
    let mut stack = vec![0usize];

    for line in scan_lines(text) {
        match line {
            Line::Heading { level, title } => {
                while arena[*stack.last().unwrap()].0.level >= level {
                    stack.pop();
                }
                let idx = arena.len();
                arena.push((DocNode::new(title.to_string(), level), Vec::new(), Vec::new()));
                let parent = *stack.last().unwrap();
                arena[parent].2.push(idx);
                stack.push(idx);
            }
            Line::Text(raw) => {
                let top = *stack.last().unwrap();
                arena[top].1.push(raw);
            }
        }
    }

    let mut slots: Vec<Option<(DocNode, Vec<usize>)>> = arena
        .into_iter()
        .map(|(mut node, lines, kids)| {
            node.body = trim_blank_lines(&lines);
            Some((node, kids))
        })
        .collect();

    fn assemble(idx: usize, slots: &mut [Option<(DocNode, Vec<usize>)>]) -> DocNode {
        let (mut node, kids) = slots[idx].take().expect("each node assembled once");
        node.children = kids.into_iter().map(|k| assemble(k, slots)).collect();
        node
    }
    let mut root = assemble(0, &mut slots);
    root.recount(tokenizer);
    TitleTree {
        doc_id: doc_id.to_string(),
        root,
    }
}

/// The document with every heading line removed, blank-line-normalised.
///
/// This is the "body text" that chunking must preserve.
pub fn body_text(markdown: &str) -> String {
    scan_lines(markdown)
        .into_iter()
        .filter_map(|l| match l {
            Line::Text(t) => Some(t),
            Line::Heading { .. } => None,
        })
        .collect::<Vec<_>>()
        .join("\n")
}
