//! Blocking JSON-over-HTTP plumbing and the retry policy shared by the
//! chat-completion and embedding clients.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use thiserror::Error;
use tracing::warn;

#[derive(Debug, Error)]
pub enum TransportError {
    /// Connection failures, timeouts and 5xx responses. Retryable.
    #[error("transport error: {0}")]
    Transport(String),
    /// HTTP 429. Retryable after the server hint when one is given.
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    /// Non-retryable HTTP status.
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        #[source]
        last: Box<TransportError>,
    },
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, TransportError::Transport(_) | TransportError::RateLimited { .. })
    }
}

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub retry_after: Option<Duration>,
    pub body: String,
}

/// Minimal POST-JSON transport, injectable for tests.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<HttpResponse, TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::Transport(e.to_string()))?;
        Ok(Self { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<HttpResponse, TransportError> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = bearer {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| TransportError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|s| s.is_finite() && *s >= 0.0)
            .map(Duration::from_secs_f64);
        let body = resp
            .text()
            .map_err(|e| TransportError::Transport(e.to_string()))?;
        Ok(HttpResponse {
            status,
            retry_after,
            body,
        })
    }
}

/// Maps a raw response onto success or a classified error.
pub fn classify(resp: HttpResponse) -> Result<String, TransportError> {
    match resp.status {
        200..=299 => Ok(resp.body),
        429 => Err(TransportError::RateLimited {
            retry_after: resp.retry_after,
        }),
        500..=599 => Err(TransportError::Transport(format!(
            "HTTP {}: {}",
            resp.status, resp.body
        ))),
        status => Err(TransportError::Status {
            status,
            body: resp.body,
        }),
    }
}

/// Exponential backoff with a hard attempt budget.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// budget is spent. Every retry increments `retries`.
    pub fn run<T>(
        &self,
        retries: &AtomicU64,
        mut op: impl FnMut() -> Result<T, TransportError>,
    ) -> Result<T, TransportError> {
        let budget = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < budget => {
                    let delay = match &e {
                        TransportError::RateLimited {
                            retry_after: Some(hint),
                        } => (*hint).min(self.max_delay),
                        _ => self.backoff(attempt),
                    };
                    warn!(attempt, ?delay, error = %e, "retrying request");
                    retries.fetch_add(1, Ordering::Relaxed);
                    std::thread::sleep(delay);
                }
                Err(e) if e.is_retryable() => {
                    return Err(TransportError::Exhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Mutex;

    use super::*;

    fn fast(max_attempts: u32) -> RetryPolicy {
        RetryPolicy {
            max_attempts,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(2),
        }
    }

    #[test]
    fn never_exceeds_attempt_budget() {
        for budget in 1..6 {
            let retries = AtomicU64::new(0);
            let calls = Mutex::new(0u32);
            let out: Result<(), _> = fast(budget).run(&retries, || {
                *calls.lock().unwrap() += 1;
                Err(TransportError::Transport("down".into()))
            });
            assert!(matches!(out, Err(TransportError::Exhausted { attempts, .. }) if attempts == budget));
            assert_eq!(*calls.lock().unwrap(), budget);
            assert_eq!(retries.load(Ordering::Relaxed), u64::from(budget - 1));
        }
    }

    #[test]
    fn non_retryable_fails_immediately() {
        let retries = AtomicU64::new(0);
        let mut calls = 0;
        let out: Result<(), _> = fast(5).run(&retries, || {
            calls += 1;
            Err(TransportError::Status { status: 400, body: "bad".into() })
        });
        assert!(matches!(out, Err(TransportError::Status { status: 400, .. })));
        assert_eq!(calls, 1);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 10,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(2), Duration::from_millis(200));
        assert_eq!(p.backoff(3), Duration::from_millis(350));
    }

    #[test]
    fn classify_statuses() {
        let resp = |status| HttpResponse { status, retry_after: None, body: "x".into() };
        assert!(classify(resp(200)).is_ok());
        assert!(matches!(classify(resp(429)), Err(TransportError::RateLimited { .. })));
        assert!(classify(resp(503)).unwrap_err().is_retryable());
        assert!(!classify(resp(401)).unwrap_err().is_retryable());
    }
}
