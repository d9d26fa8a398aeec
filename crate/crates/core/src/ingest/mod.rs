//! Document ingestion: title trees, budgeted chunking and exam-item extraction.

pub mod exam;
pub mod split;
pub mod tree;

use std::path::Path;

pub use exam::{
    parse_exam_items, parse_with_profile, Answer, ExamItem, ExamParse, ExamPatterns, ExamProfile,
    ExamWarning, ProfileRegistry,
};
pub use split::{
    pack_greedy, split_paragraphs, split_tree, split_tree_traced, Chunk, ChunkOrigin, TracedChunk,
    MIN_BUDGET,
};
pub use tree::{body_text, build_title_tree, build_title_tree_str, DocNode, TitleTree};

use crate::tokenize::Tokenizer;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{doc_id}: not valid text at byte offset {offset}")]
    Decode { doc_id: String, offset: usize },
    #[error("token budget {budget} is below the minimum of {min}")]
    Budget { budget: usize, min: usize },
    #[error("exam profile: {0}")]
    Profile(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus manifest {path}: {message}")]
    Manifest { path: String, message: String },
}

/// Reads, parses and splits one markdown file.
pub fn chunk_file(
    path: &Path,
    doc_id: &str,
    budget: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<Chunk>, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let tree = build_title_tree(&bytes, doc_id, tokenizer)?;
    split_tree(&tree, budget, tokenizer)
}

/// Parses a corpus manifest: a JSON object mapping doc_id to a markdown path.
///
/// Relative paths resolve against the manifest's directory. Entries come back
/// sorted by doc_id.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, std::path::PathBuf)>, IngestError> {
    let raw = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let map: std::collections::BTreeMap<String, String> =
        serde_json::from_str(&raw).map_err(|e| IngestError::Manifest {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(map
        .into_iter()
        .map(|(id, p)| {
            let p = std::path::PathBuf::from(p);
            let full = if p.is_absolute() { p } else { base.join(p) };
            (id, full)
        })
        .collect())
}
