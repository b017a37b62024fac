//! The chat backend against a local HTTP stub that rate-limits first.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use capital::backend::{ChatBackendConfig, GenerationBackend, GenerationRequest, OpenAiChatBackend};
use capital::prompting::PromptText;
use capital::transport::{ReqwestTransport, RetryPolicy};

struct Stub {
    url: String,
    bodies: Arc<Mutex<Vec<serde_json::Value>>>,
    handle: JoinHandle<()>,
}

/// Serves one canned `(status, body)` per connection, then exits.
fn serve(responses: Vec<(u16, String)>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = bodies.clone();
    let handle = std::thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some((name, value)) = line.split_once(':') {
                    if name.eq_ignore_ascii_case("content-length") {
                        length = value.trim().parse().unwrap();
                    }
                }
            }
            let mut request = vec![0; length];
            reader.read_exact(&mut request).unwrap();
            seen.lock().unwrap().push(serde_json::from_slice(&request).unwrap());
            let reason = if status == 200 { "OK" } else { "Too Many Requests" };
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nRetry-After: 0\r\n\
                 Content-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    Stub { url, bodies, handle }
}

fn backend(url: &str, max_attempts: u32) -> OpenAiChatBackend {
    let config = ChatBackendConfig {
        base_url: url.into(),
        model: "stub-model".into(),
        api_key: Some("test-key".into()),
        use_n_parameter: true,
        retry: RetryPolicy {
            max_attempts,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(5),
        },
    };
    let transport = Arc::new(ReqwestTransport::new(Duration::from_secs(10)).unwrap());
    OpenAiChatBackend::new(config, transport)
}

fn request() -> GenerationRequest {
    GenerationRequest {
        prompt: PromptText::raw("Sentence: the fries were cold."),
        temperature: 0.7,
        count: 2,
        max_tokens: 64,
        request_tag: "stub/cot".into(),
    }
}

fn rate_limited() -> (u16, String) {
    (429, r#"{"error":{"message":"slow down"}}"#.into())
}

#[test]
fn retries_through_rate_limits() {
    let ok = serde_json::json!({"choices": [
        {"index": 0, "message": {"role": "assistant", "content": "The polarity is negative"}},
        {"index": 1, "message": {"role": "assistant", "content": "The polarity is neutral"}},
    ]})
    .to_string();
    let stub = serve(vec![rate_limited(), rate_limited(), (200, ok)]);
    let backend = backend(&stub.url, 5);
    let completions = backend.sample_completions(&request()).unwrap();
    stub.handle.join().unwrap();

    let texts: Vec<&str> = completions.iter().map(|c| c.text.as_str()).collect();
    assert_eq!(texts, ["The polarity is negative", "The polarity is neutral"]);
    let stats = backend.stats();
    assert_eq!((stats.calls, stats.retries), (3, 2));
    let bodies = stub.bodies.lock().unwrap();
    assert_eq!(bodies.len(), 3);
    assert_eq!(bodies[0]["n"], 2);
    assert_eq!(bodies[0]["model"], "stub-model");
}

#[test]
fn gives_up_after_the_attempt_budget() {
    let stub = serve(vec![rate_limited(), rate_limited(), rate_limited()]);
    let backend = backend(&stub.url, 3);
    let err = backend.sample_completions(&request()).unwrap_err();
    stub.handle.join().unwrap();
    assert!(err.to_string().contains('3'), "{err}");
    assert_eq!(backend.stats().calls, 3);
    assert_eq!(backend.stats().retries, 2);
}
