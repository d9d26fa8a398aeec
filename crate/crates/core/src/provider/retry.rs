use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ProviderError;

/// Exponential backoff for retryable provider errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            initial_backoff_ms: 250,
            max_backoff_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Same attempt count, no sleeping. For tests and mocks.
    pub fn immediate(max_attempts: usize) -> Self {
        Self {
            max_attempts,
            initial_backoff_ms: 0,
            max_backoff_ms: 0,
        }
    }

    fn backoff(&self, failed_attempts: usize) -> Duration {
        let shift = failed_attempts.saturating_sub(1).min(16) as u32;
        let ms = self.initial_backoff_ms.saturating_mul(1u64 << shift);
        Duration::from_millis(ms.min(self.max_backoff_ms))
    }
}

/// Runs `op` until it succeeds, fails non-retryably, or attempts run out.
///
/// On success returns the value together with the number of attempts made.
pub fn with_retries<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut() -> Result<T, ProviderError>,
) -> Result<(T, usize), ProviderError> {
    let max = policy.max_attempts.max(1);
    let mut attempt = 0;
    loop {
        attempt += 1;
        match op() {
            Ok(v) => return Ok((v, attempt)),
            Err(e) if e.is_retryable() && attempt < max => {
                let wait = policy.backoff(attempt);
                if !wait.is_zero() {
                    std::thread::sleep(wait);
                }
            }
            Err(e) if e.is_retryable() => {
                return Err(ProviderError::Exhausted {
                    attempts: attempt,
                    last: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        }
    }
}
