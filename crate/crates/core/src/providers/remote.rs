//! HTTP clients for a generic chat-completions / embeddings contract.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{CompletionProvider, CompletionRequest, Embedding, EmbeddingProvider, Expect};
use crate::error::{Error, Result};

/// Bounded retries with exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff * 2u32.saturating_pow(attempt)
    }
}

enum Failure {
    Retryable(String),
    Fatal(String),
}

fn post_with_retry(
    client: &Client,
    endpoint: &str,
    key: Option<&str>,
    body: &Value,
    retry: RetryPolicy,
) -> Result<Value> {
    let attempts = retry.attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        let mut req = client.post(endpoint).json(body);
        if let Some(k) = key {
            req = req.bearer_auth(k);
        }
        let outcome = match req.send() {
            Err(e) => Failure::Retryable(e.to_string()),
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    return resp.json::<Value>().map_err(|e| Error::Provider {
                        message: format!("invalid response body: {e}"),
                        attempts: attempt + 1,
                        retryable: false,
                    });
                }
                let msg = format!("HTTP {status}");
                if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
                    Failure::Retryable(msg)
                } else {
                    Failure::Fatal(msg)
                }
            }
        };
        match outcome {
            Failure::Fatal(message) => {
                return Err(Error::Provider {
                    message,
                    attempts: attempt + 1,
                    retryable: false,
                })
            }
            Failure::Retryable(message) => {
                log::warn!("provider attempt {} failed: {message}", attempt + 1);
                last = message;
                if attempt + 1 < attempts {
                    std::thread::sleep(retry.backoff(attempt));
                }
            }
        }
    }
    Err(Error::Provider {
        message: last,
        attempts,
        retryable: true,
    })
}

fn build_client() -> Result<Client> {
    Client::builder()
        .timeout(Duration::from_secs(120))
        .build()
        .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))
}

pub struct RemoteCompletion {
    client: Client,
    endpoint: String,
    key: Option<String>,
    model: String,
    retry: RetryPolicy,
}

impl RemoteCompletion {
    pub fn new(
        endpoint: impl Into<String>,
        key: Option<String>,
        model: impl Into<String>,
        retry: RetryPolicy,
    ) -> Result<Self> {
        Ok(Self {
            client: build_client()?,
            endpoint: endpoint.into(),
            key,
            model: model.into(),
            retry,
        })
    }
}

impl CompletionProvider for RemoteCompletion {
    fn generate(&self, request: &CompletionRequest) -> Result<String> {
        let mut body = json!({
            "model": self.model,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        if request.expect == Expect::JsonObject {
            body["response_format"] = json!({"type": "json_object"});
        }
        let resp = post_with_retry(
            &self.client,
            &self.endpoint,
            self.key.as_deref(),
            &body,
            self.retry,
        )?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| Error::Provider {
                message: "response has no choices[0].message.content".into(),
                attempts: 1,
                retryable: false,
            })
    }
}

pub struct RemoteEmbedder {
    client: Client,
    endpoint: String,
    key: Option<String>,
    model: String,
    dim: usize,
    retry: RetryPolicy,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        key: Option<String>,
        model: impl Into<String>,
        dim: usize,
        retry: RetryPolicy,
    ) -> Result<Self> {
        Ok(Self {
            client: build_client()?,
            endpoint: endpoint.into(),
            key,
            model: model.into(),
            dim,
            retry,
        })
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Embedding> {
        let body = json!({ "model": self.model, "input": text });
        let resp = post_with_retry(
            &self.client,
            &self.endpoint,
            self.key.as_deref(),
            &body,
            self.retry,
        )?;
        let values = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Provider {
                message: "response has no data[0].embedding".into(),
                attempts: 1,
                retryable: false,
            })?
            .iter()
            .map(|v| v.as_f64().unwrap_or(f64::NAN))
            .collect::<Vec<_>>();
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Provider {
                message: "embedding contains non-numeric values".into(),
                attempts: 1,
                retryable: false,
            });
        }
        Ok(Embedding::new(values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Minimal HTTP server answering every request with the given responses in
    /// turn (the last one repeats). Returns the URL and a request counter.
    fn serve(responses: Vec<(u16, &'static str)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let count = Arc::new(AtomicUsize::new(0));
        let c = count.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut buf = [0u8; 8192];
                let mut data = Vec::new();
                // Read headers, then the declared body length.
                loop {
                    let n = stream.read(&mut buf).unwrap_or(0);
                    if n == 0 {
                        break;
                    }
                    data.extend_from_slice(&buf[..n]);
                    let text = String::from_utf8_lossy(&data);
                    if let Some(h) = text.find("\r\n\r\n") {
                        let len = text[..h]
                            .lines()
                            .find_map(|l| {
                                l.to_lowercase()
                                    .strip_prefix("content-length:")
                                    .map(|v| v.trim().parse::<usize>().unwrap_or(0))
                            })
                            .unwrap_or(0);
                        if data.len() >= h + 4 + len {
                            break;
                        }
                    }
                }
                let i = c.fetch_add(1, Ordering::SeqCst);
                let (status, body) = responses[i.min(responses.len() - 1)];
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        (format!("http://{addr}/v1/chat/completions"), count)
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(5),
        }
    }

    #[test]
    fn default_policy_is_three_attempts_from_half_a_second() {
        let p = RetryPolicy::default();
        assert_eq!(p.attempts, 3);
        assert_eq!(p.backoff(0), Duration::from_millis(500));
        assert_eq!(p.backoff(1), Duration::from_millis(1000));
    }

    #[test]
    fn server_errors_exhaust_three_attempts() {
        let (url, count) = serve(vec![(503, "{}")]);
        let p = RemoteCompletion::new(url, Some("k".into()), "m", fast_retry()).unwrap();
        let err = p.complete(&CompletionRequest::new("s", "u")).unwrap_err();
        match err {
            Error::Provider {
                attempts,
                retryable,
                ..
            } => {
                assert_eq!(attempts, 3);
                assert!(retryable);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(count.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn recovers_after_a_transient_failure() {
        let ok = r#"{"choices":[{"message":{"content":"{\"a\": 1}"}}]}"#;
        let (url, count) = serve(vec![(500, "{}"), (200, ok)]);
        let p = RemoteCompletion::new(url, None, "m", fast_retry()).unwrap();
        let out = p
            .complete(&CompletionRequest::new("s", "u").json())
            .unwrap();
        assert_eq!(out, "{\"a\": 1}");
        assert_eq!(count.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, count) = serve(vec![(401, "{}")]);
        let p = RemoteCompletion::new(url, None, "m", fast_retry()).unwrap();
        assert!(p.complete(&CompletionRequest::new("s", "u")).is_err());
        assert_eq!(count.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn embedder_reads_data_array() {
        let (url, _) = serve(vec![(200, r#"{"data":[{"embedding":[0.6,0.8]}]}"#)]);
        let e = RemoteEmbedder::new(url, None, "m", 2, fast_retry()).unwrap();
        let v = e.embed("hello").unwrap();
        assert_eq!(v.values, vec![0.6, 0.8]);
    }

    #[test]
    fn json_expectation_unmet_carries_raw_text() {
        let (url, _) = serve(vec![(
            200,
            r#"{"choices":[{"message":{"content":"sorry, no"}}]}"#,
        )]);
        let p = RemoteCompletion::new(url, None, "m", fast_retry()).unwrap();
        match p.complete(&CompletionRequest::new("s", "u").json()) {
            Err(Error::MalformedJson { raw, .. }) => assert_eq!(raw, "sorry, no"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
