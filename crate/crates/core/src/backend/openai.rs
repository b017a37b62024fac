use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Deserialize;
use serde_json::json;

use super::{BackendError, CallStats, Completion, GenerationBackend, GenerationRequest};
use crate::transport::{classify, HttpTransport, RetryPolicy, TransportError};

#[derive(Debug, Clone)]
pub struct ChatBackendConfig {
    /// Base URL without the `/v1/...` suffix, e.g. `https://api.openai.com`.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    /// Ask for all samples in one call via `n`. Endpoints that ignore `n`
    /// are topped up with further calls either way.
    pub use_n_parameter: bool,
    pub retry: RetryPolicy,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Debug, Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

/// Client for `POST {base}/v1/chat/completions`.
pub struct OpenAiChatBackend {
    config: ChatBackendConfig,
    id: String,
    transport: Arc<dyn HttpTransport>,
    calls: AtomicU64,
    retries: AtomicU64,
}

impl OpenAiChatBackend {
    pub fn new(config: ChatBackendConfig, transport: Arc<dyn HttpTransport>) -> Self {
        let id = format!("openai:{}", config.model);
        Self {
            config,
            id,
            transport,
            calls: AtomicU64::new(0),
            retries: AtomicU64::new(0),
        }
    }

    fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn call_once(&self, request: &GenerationRequest, n: usize) -> Result<Vec<String>, TransportError> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt.rendered()}],
            "temperature": request.temperature,
            "n": n,
            "max_tokens": request.max_tokens,
        });
        let url = self.url();
        let text = self.config.retry.run(&self.retries, || {
            self.calls.fetch_add(1, Ordering::Relaxed);
            classify(
                self.transport
                    .post_json(&url, self.config.api_key.as_deref(), &body)?,
            )
        })?;
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| TransportError::Decode(e.to_string()))?;
        Ok(parsed
            .choices
            .into_iter()
            .map(|c| c.message.content.unwrap_or_default())
            .collect())
    }
}

impl GenerationBackend for OpenAiChatBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn sample_completions(&self, request: &GenerationRequest) -> Result<Vec<Completion>, BackendError> {
        request.validate()?;
        let mut texts = Vec::with_capacity(request.count);
        while texts.len() < request.count {
            let remaining = request.count - texts.len();
            let n = if self.config.use_n_parameter { remaining } else { 1 };
            let batch = self.call_once(request, n)?;
            if batch.is_empty() {
                return Err(TransportError::Decode("response carried no choices".into()).into());
            }
            texts.extend(batch);
        }
        texts.truncate(request.count);
        Ok(texts
            .into_iter()
            .map(|text| Completion {
                text,
                backend_id: self.id.clone(),
                cached: false,
            })
            .collect())
    }

    fn stats(&self) -> CallStats {
        CallStats {
            calls: self.calls.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;
    use std::sync::Mutex;
    use std::time::Duration;

    use super::*;
    use crate::prompting::PromptText;
    use crate::transport::HttpResponse;

    struct Canned {
        responses: Mutex<VecDeque<HttpResponse>>,
        bodies: Mutex<Vec<serde_json::Value>>,
    }

    impl HttpTransport for Canned {
        fn post_json(
            &self,
            _url: &str,
            _bearer: Option<&str>,
            body: &serde_json::Value,
        ) -> Result<HttpResponse, TransportError> {
            self.bodies.lock().unwrap().push(body.clone());
            self.responses
                .lock()
                .unwrap()
                .pop_front()
                .ok_or_else(|| TransportError::Transport("no more responses".into()))
        }
    }

    fn ok(contents: &[&str]) -> HttpResponse {
        let choices: Vec<_> = contents
            .iter()
            .map(|c| json!({"index": 0, "message": {"role": "assistant", "content": c}}))
            .collect();
        HttpResponse {
            status: 200,
            retry_after: None,
            body: json!({ "choices": choices }).to_string(),
        }
    }

    fn backend(responses: Vec<HttpResponse>, use_n: bool) -> (OpenAiChatBackend, Arc<Canned>) {
        let canned = Arc::new(Canned {
            responses: Mutex::new(responses.into()),
            bodies: Mutex::new(Vec::new()),
        });
        let config = ChatBackendConfig {
            base_url: "http://stub".into(),
            model: "m".into(),
            api_key: None,
            use_n_parameter: use_n,
            retry: RetryPolicy {
                max_attempts: 3,
                base_delay: Duration::from_millis(1),
                max_delay: Duration::from_millis(1),
            },
        };
        (OpenAiChatBackend::new(config, canned.clone()), canned)
    }

    fn request(count: usize) -> GenerationRequest {
        GenerationRequest {
            prompt: PromptText::raw("hello"),
            temperature: 0.7,
            count,
            max_tokens: 16,
            request_tag: "t".into(),
        }
    }

    #[test]
    fn tops_up_when_endpoint_ignores_n() {
        let (b, canned) = backend(vec![ok(&["a"]), ok(&["b", "c"])], true);
        let out = b.sample_completions(&request(3)).unwrap();
        assert_eq!(out.iter().map(|c| c.text.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        let bodies = canned.bodies.lock().unwrap();
        assert_eq!(bodies[0]["n"], 3);
        assert_eq!(bodies[1]["n"], 2);
        assert_eq!(bodies[0]["messages"][0]["content"], "hello");
    }

    #[test]
    fn one_sample_per_call_without_n() {
        let (b, canned) = backend(vec![ok(&["a"]), ok(&["b"])], false);
        assert_eq!(b.sample_completions(&request(2)).unwrap().len(), 2);
        assert!(canned.bodies.lock().unwrap().iter().all(|body| body["n"] == 1));
        assert_eq!(b.stats().calls, 2);
    }

    #[test]
    fn exhausted_budget_surfaces_error() {
        let server_error = HttpResponse { status: 500, retry_after: None, body: "boom".into() };
        let (b, _) = backend(vec![server_error.clone(), server_error.clone(), server_error], true);
        let err = b.sample_completions(&request(1)).unwrap_err();
        assert!(matches!(err, BackendError::Transport(TransportError::Exhausted { attempts: 3, .. })));
        assert_eq!(b.stats(), CallStats { calls: 3, retries: 2 });
    }
}
