//! Retrieval-augmented question answering with query rewriting.
//!
//! The pieces, in pipeline order:
//!
//! - [`ingest`]: markdown documents to heading-aware chunks, exam text to items
//! - [`embed`] and [`store`]: embedding client with caching, brute-force cosine index
//! - [`rewrite`]: few-shot prompt assembly and rewrite parsing
//! - [`pipeline`]: rewrite, retrieve per rewrite, fuse, read
//! - [`forge`]: pretraining and supervised fine-tuning data export
//! - [`eval`]: answer metrics, discrepancy and batch runs
//!
//! Model access goes through the traits in [`provider`], which also holds
//! deterministic mocks for offline use.

pub mod embed;
pub mod eval;
pub mod forge;
pub mod ingest;
pub mod par;
pub mod pipeline;
pub mod provider;
pub mod rewrite;
pub mod store;
pub mod tokenize;

pub use embed::{EmbedClient, EmbedError, EmbeddingVector};
pub use ingest::{Chunk, IngestError, TitleTree};
pub use pipeline::{fuse, Mode, Pipeline, RagAnswer, ScoredDoc};
pub use rewrite::{PromptTemplate, RewriteSet, Rewriter};
pub use store::{StoreError, VectorIndex};
pub use tokenize::{count_tokens, Tokenizer, WordCjkTokenizer};
