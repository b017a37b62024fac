//! Text embeddings for CoTs and sentences.
//!
//! Two encoders share one interface: a remote client for OpenAI-compatible
//! `/v1/embeddings` endpoints and a local hashed character-trigram embedder.
//! The local embedder treats the whole text as one unit; it has no notion
//! of `[CLS]`/`[SEP]` tokens.

use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::model::{EmbeddingVector, ModelError};
use crate::transport::{classify, HttpTransport, RetryPolicy, TransportError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid embedding: {0}")]
    Invalid(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Remote,
    LocalDeterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDescriptor {
    pub kind: EncoderKind,
    pub dim: usize,
}

pub trait Encoder: Send + Sync {
    fn descriptor(&self) -> EncoderDescriptor;

    /// L2-normalized embedding of `text`.
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EncoderError>;
}

impl<E: Encoder + ?Sized> Encoder for Arc<E> {
    fn descriptor(&self) -> EncoderDescriptor {
        (**self).descriptor()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EncoderError> {
        (**self).embed(text)
    }
}

impl<E: Encoder + ?Sized> Encoder for Box<E> {
    fn descriptor(&self) -> EncoderDescriptor {
        (**self).descriptor()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EncoderError> {
        (**self).embed(text)
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EncoderError> {
    if a.dim() != b.dim() {
        return Err(EncoderError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    let denom = a.norm() * b.norm();
    let sim = if denom == 0.0 { 0.0 } else { dot / denom };
    Ok(sim.clamp(-1.0, 1.0))
}

pub const LOCAL_DIM: usize = 256;
pub const NGRAM: usize = 3;

/// Hashed character n-gram term frequencies (n = 3, 64-bit FNV-1a into
/// `dim` buckets), L2-normalized. Texts shorter than three characters
/// count as a single gram.
#[derive(Debug, Clone, Copy)]
pub struct LocalEncoder {
    dim: usize,
}

impl Default for LocalEncoder {
    fn default() -> Self {
        Self { dim: LOCAL_DIM }
    }
}

impl LocalEncoder {
    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Encoder for LocalEncoder {
    fn descriptor(&self) -> EncoderDescriptor {
        EncoderDescriptor {
            kind: EncoderKind::LocalDeterministic,
            dim: self.dim,
        }
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EncoderError> {
        if text.trim().is_empty() {
            return Err(EncoderError::EmptyText);
        }
        let chars: Vec<char> = text.chars().collect();
        let mut counts = vec![0.0; self.dim];
        let mut bump = |gram: &[char]| {
            let s: String = gram.iter().collect();
            counts[(fnv1a64(s.as_bytes()) % self.dim as u64) as usize] += 1.0;
        };
        if chars.len() < NGRAM {
            bump(&chars);
        } else {
            chars.windows(NGRAM).for_each(bump);
        }
        Ok(EmbeddingVector::normalized(counts)?)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEncoderConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub dim: usize,
    pub retry: RetryPolicy,
}

#[derive(Debug, Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

/// Client for `POST {base}/v1/embeddings`; results are re-normalized.
pub struct RemoteEncoder {
    config: RemoteEncoderConfig,
    transport: Arc<dyn HttpTransport>,
    retries: AtomicU64,
}

impl RemoteEncoder {
    pub fn new(config: RemoteEncoderConfig, transport: Arc<dyn HttpTransport>) -> Self {
        Self {
            config,
            transport,
            retries: AtomicU64::new(0),
        }
    }
}

impl Encoder for RemoteEncoder {
    fn descriptor(&self) -> EncoderDescriptor {
        EncoderDescriptor {
            kind: EncoderKind::Remote,
            dim: self.config.dim,
        }
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EncoderError> {
        if text.trim().is_empty() {
            return Err(EncoderError::EmptyText);
        }
        let url = format!("{}/v1/embeddings", self.config.base_url.trim_end_matches('/'));
        let body = json!({ "model": self.config.model, "input": text });
        let raw = self.config.retry.run(&self.retries, || {
            classify(
                self.transport
                    .post_json(&url, self.config.api_key.as_deref(), &body)?,
            )
        })?;
        let parsed: EmbeddingsResponse =
            serde_json::from_str(&raw).map_err(|e| TransportError::Decode(e.to_string()))?;
        let values = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| TransportError::Decode("empty embedding list".into()))?
            .embedding;
        if values.len() != self.config.dim {
            return Err(EncoderError::DimensionMismatch {
                left: values.len(),
                right: self.config.dim,
            });
        }
        Ok(EmbeddingVector::normalized(values)?)
    }
}
