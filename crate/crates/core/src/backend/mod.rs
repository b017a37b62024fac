//! Text-generation backends: an OpenAI-compatible HTTP client, a scripted
//! test double, and a content-addressed response cache that wraps either.

mod cache;
mod openai;
mod scripted;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompting::PromptText;
use crate::transport::TransportError;

pub use cache::{CacheStats, CachedBackend, ResponseCache};
pub use openai::{ChatBackendConfig, OpenAiChatBackend};
pub use scripted::{Script, ScriptedBackend};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("no script entry for tag {tag:?} (fingerprint {fingerprint}) with {needed} samples (have {available})")]
    ScriptMiss {
        fingerprint: String,
        tag: String,
        needed: usize,
        available: usize,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache I/O: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub prompt: PromptText,
    pub temperature: f64,
    pub count: usize,
    pub max_tokens: u32,
    /// Stable, human-readable label of the call site; part of the cache key.
    pub request_tag: String,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.count < 1 {
            return Err(BackendError::InvalidRequest("count must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be finite and non-negative (got {})",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub backend_id: String,
    pub cached: bool,
}

/// Counters a backend exposes for logging and tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallStats {
    pub calls: u64,
    pub retries: u64,
}

pub trait GenerationBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Returns exactly `request.count` completions.
    fn sample_completions(&self, request: &GenerationRequest) -> Result<Vec<Completion>, BackendError>;

    fn stats(&self) -> CallStats {
        CallStats::default()
    }
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn sample_completions(&self, request: &GenerationRequest) -> Result<Vec<Completion>, BackendError> {
        (**self).sample_completions(request)
    }

    fn stats(&self) -> CallStats {
        (**self).stats()
    }
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for Box<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn sample_completions(&self, request: &GenerationRequest) -> Result<Vec<Completion>, BackendError> {
        (**self).sample_completions(request)
    }

    fn stats(&self) -> CallStats {
        (**self).stats()
    }
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stable fingerprint of a rendered prompt.
pub fn prompt_fingerprint(prompt: &PromptText) -> String {
    sha256_hex(prompt.rendered().as_bytes())
}
