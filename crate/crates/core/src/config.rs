//! Run configuration: pipeline hyperparameters plus backend, encoder and
//! path settings, read from TOML.
//!
//! API keys never appear here; they come from `CAPITAL_API_KEY` and
//! `CAPITAL_EMBEDDING_API_KEY` (falling back to the former).

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    CachedBackend, ChatBackendConfig, GenerationBackend, OpenAiChatBackend, ResponseCache,
    ScriptedBackend,
};
use crate::encoder::{Encoder, LocalEncoder, RemoteEncoder, RemoteEncoderConfig, LOCAL_DIM};
use crate::model::PipelineConfig;
use crate::prompting::{PromptError, Templates};
use crate::transport::{ReqwestTransport, RetryPolicy, TransportError};

pub const API_KEY_ENV: &str = "CAPITAL_API_KEY";
pub const EMBEDDING_KEY_ENV: &str = "CAPITAL_EMBEDDING_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Templates(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Scripted,
    Openai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSettings {
    pub kind: BackendKind,
    /// Script file for the scripted backend.
    pub script: Option<PathBuf>,
    pub base_url: String,
    pub model: String,
    pub use_n_parameter: bool,
    pub timeout_secs: u64,
    pub max_attempts: u32,
}

impl Default for BackendSettings {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            script: None,
            base_url: "https://api.openai.com".into(),
            model: "gpt-3.5-turbo".into(),
            use_n_parameter: true,
            timeout_secs: 60,
            max_attempts: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderChoice {
    #[default]
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSettings {
    pub kind: EncoderChoice,
    pub base_url: String,
    pub model: String,
    pub dim: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            kind: EncoderChoice::Local,
            base_url: "https://api.openai.com".into(),
            model: "text-embedding-3-small".into(),
            dim: LOCAL_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub backend: BackendSettings,
    pub encoder: EncoderSettings,
    pub dataset: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    /// Items evaluated concurrently.
    pub parallelism: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            backend: BackendSettings::default(),
            encoder: EncoderSettings::default(),
            dataset: None,
            store: None,
            cache_dir: None,
            templates_dir: None,
            parallelism: 4,
        }
    }
}

fn env_key(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.trim().is_empty())
}

impl RunConfig {
    pub fn from_toml_str(raw: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(raw)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&raw)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks everything that can be checked before any network call.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pipeline
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        match self.backend.kind {
            BackendKind::Scripted if self.backend.script.is_none() => {
                return Err(ConfigError::Invalid("the scripted backend needs a script file (--script)".into()));
            }
            BackendKind::Openai if self.backend.model.trim().is_empty() || self.backend.base_url.trim().is_empty() => {
                return Err(ConfigError::Invalid("the openai backend needs base_url and model".into()));
            }
            _ => {}
        }
        if self.backend.max_attempts == 0 {
            return Err(ConfigError::Invalid("backend.max_attempts must be at least 1".into()));
        }
        if self.encoder.dim == 0 {
            return Err(ConfigError::Invalid("encoder.dim must be positive".into()));
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.backend.max_attempts,
            ..RetryPolicy::default()
        }
    }

    fn transport(&self) -> Result<Arc<ReqwestTransport>, ConfigError> {
        Ok(Arc::new(ReqwestTransport::new(Duration::from_secs(self.backend.timeout_secs))?))
    }

    /// Generation backend, wrapped in the response cache when `cache_dir`
    /// is set.
    pub fn build_backend(&self) -> Result<Box<dyn GenerationBackend>, ConfigError> {
        let inner: Box<dyn GenerationBackend> = match self.backend.kind {
            BackendKind::Scripted => {
                let path = self
                    .backend
                    .script
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("missing script path".into()))?;
                Box::new(ScriptedBackend::from_file(path).map_err(|source| ConfigError::Read {
                    path: path.display().to_string(),
                    source,
                })?)
            }
            BackendKind::Openai => Box::new(OpenAiChatBackend::new(
                ChatBackendConfig {
                    base_url: self.backend.base_url.clone(),
                    model: self.backend.model.clone(),
                    api_key: env_key(API_KEY_ENV),
                    use_n_parameter: self.backend.use_n_parameter,
                    retry: self.retry_policy(),
                },
                self.transport()?,
            )),
        };
        Ok(match &self.cache_dir {
            Some(dir) => {
                let cache = ResponseCache::open(dir).map_err(|source| ConfigError::Read {
                    path: dir.display().to_string(),
                    source,
                })?;
                Box::new(CachedBackend::new(inner, cache))
            }
            None => inner,
        })
    }

    pub fn build_encoder(&self) -> Result<Box<dyn Encoder>, ConfigError> {
        Ok(match self.encoder.kind {
            EncoderChoice::Local => Box::new(LocalEncoder::with_dim(self.encoder.dim)),
            EncoderChoice::Remote => Box::new(RemoteEncoder::new(
                RemoteEncoderConfig {
                    base_url: self.encoder.base_url.clone(),
                    model: self.encoder.model.clone(),
                    api_key: env_key(EMBEDDING_KEY_ENV).or_else(|| env_key(API_KEY_ENV)),
                    dim: self.encoder.dim,
                    retry: self.retry_policy(),
                },
                self.transport()?,
            )),
        })
    }

    pub fn templates(&self) -> Result<Templates, ConfigError> {
        Ok(match &self.templates_dir {
            Some(dir) => Templates::load_dir(dir)?,
            None => Templates::builtin(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ablation;

    #[test]
    fn parses_partial_file_over_defaults() {
        let cfg = RunConfig::from_toml_str(
            r#"
            parallelism = 2
            [pipeline]
            clusters_k = 12
            ablations = ["no-weighting"]
            [backend]
            kind = "scripted"
            script = "s.json"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.pipeline.clusters_k, 12);
        assert_eq!(cfg.pipeline.cot_samples_a, 20);
        assert!(cfg.pipeline.has(Ablation::NoWeighting));
        assert_eq!(cfg.parallelism, 2);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(RunConfig::from_toml_str("api_key = \"x\"").is_err());
        assert!(RunConfig::from_toml_str("[pipeline]\nclusters = 3").is_err());
        assert!(RunConfig::from_toml_str("[backend]\napi_key = \"x\"").is_err());
    }

    #[test]
    fn validation_catches_missing_script_and_bad_k() {
        let cfg = RunConfig::default();
        assert!(cfg.validate().unwrap_err().to_string().contains("--script"));
        let mut cfg = RunConfig::default();
        cfg.backend.script = Some("s.json".into());
        cfg.pipeline.clusters_k = 21;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.backend.script = Some("s.json".into());
        cfg.pipeline.ablations = vec![Ablation::NoKmeans];
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    }
}
