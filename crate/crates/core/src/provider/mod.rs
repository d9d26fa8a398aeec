//! Model providers: embedding and chat endpoints behind small traits.
//!
//! Two implementations ship: an HTTP client for the common
//! `/embeddings` + `/chat/completions` wire format, and deterministic mocks
//! for offline runs.

mod http;
mod limiter;
mod mock;
mod retry;

pub use http::{HttpConfig, OpenAiCompatClient};
pub use limiter::RateLimiter;
pub use mock::{char_trigrams, FnChat, MockBehavior, MockChat, MockEmbedder, ScriptedChat, ScriptedEmbedder, DEFAULT_MOCK_DIM};
pub use retry::{with_retries, RetryPolicy};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum ProviderError {
    /// Network failure, timeout, 429 or 5xx; worth retrying.
    #[error("transport failure: {message}")]
    Transport { message: String },
    /// Every retry failed.
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: String },
    /// The provider answered, but not with what was asked for.
    #[error("integrity: {0}")]
    Integrity(String),
    /// Non-retryable HTTP status or malformed request.
    #[error("rejected: {0}")]
    Rejected(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport { .. })
    }

    pub fn transport(message: impl Into<String>) -> Self {
        ProviderError::Transport {
            message: message.into(),
        }
    }
}

/// Turns text into vectors.
pub trait Embedder: Send + Sync {
    /// Identifies provider and model, e.g. `openai:text-embedding-3-small`.
    fn tag(&self) -> String;
    /// Vector length, when known ahead of the first call.
    fn dim(&self) -> Option<usize>;
    /// One raw attempt; retries are layered on top by the caller.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;
}

/// A chat-completions style text generator.
pub trait ChatModel: Send + Sync {
    fn tag(&self) -> String;
    fn complete(&self, messages: &[ChatMessage], temperature: f32) -> Result<String, ProviderError>;
}

impl<T: Embedder + ?Sized> Embedder for std::sync::Arc<T> {
    fn tag(&self) -> String {
        (**self).tag()
    }
    fn dim(&self) -> Option<usize> {
        (**self).dim()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        (**self).embed(texts)
    }
}

impl<T: ChatModel + ?Sized> ChatModel for std::sync::Arc<T> {
    fn tag(&self) -> String {
        (**self).tag()
    }
    fn complete(&self, messages: &[ChatMessage], temperature: f32) -> Result<String, ProviderError> {
        (**self).complete(messages, temperature)
    }
}

/// Chat with retries applied; returns the text and attempts used.
pub fn complete_with_retries(
    model: &dyn ChatModel,
    messages: &[ChatMessage],
    temperature: f32,
    policy: &RetryPolicy,
) -> Result<(String, usize), ProviderError> {
    with_retries(policy, || model.complete(messages, temperature))
}
