//! OpenAI-compatible HTTP plumbing shared by the judge, the answer models and
//! the embedding provider.

use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{debug, warn};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ClientError {
    /// Connection refused, DNS failure, timeout and similar.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Status { code, .. } => *code == 429 || *code >= 500,
            ClientError::Protocol(_) => false,
        }
    }

    /// The endpoint itself is down (as opposed to rejecting one request).
    pub fn is_outage(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Status { code, .. } => *code >= 500,
            ClientError::Protocol(_) => false,
        }
    }
}

/// Exponential backoff with full jitter.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub retry_limit: u32,
    pub backoff_base: Duration,
}

impl RetryPolicy {
    pub fn new(retry_limit: u32, backoff_base_ms: u64) -> Self {
        RetryPolicy {
            retry_limit,
            backoff_base: Duration::from_millis(backoff_base_ms),
        }
    }

    pub fn delay(&self, attempt: u32) -> Duration {
        if self.backoff_base.is_zero() {
            return Duration::ZERO;
        }
        let cap = self.backoff_base.saturating_mul(1 << attempt.min(10));
        cap.mul_f64(rand::rng().random_range(0.5..=1.0))
    }

    pub fn run<T>(
        &self,
        mut call: impl FnMut() -> Result<T, ClientError>,
    ) -> Result<T, ClientError> {
        let mut attempt = 0;
        loop {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.retry_limit => {
                    warn!(attempt, error = %e, "request failed, retrying");
                    std::thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

/// One chat-completion call. Implementations do not retry; callers wrap them
/// in a [`RetryPolicy`].
pub trait ChatClient: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, ClientError>;
}

/// A JSON-over-HTTP endpoint with bearer authentication.
#[derive(Clone)]
pub struct HttpEndpoint {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpEndpoint")
            .field("base_url", &self.base_url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpEndpoint {
    /// `api_key_env` names the environment variable holding the key; a
    /// missing variable means unauthenticated requests.
    pub fn new(base_url: &str, api_key_env: Option<&str>, timeout: Duration) -> Self {
        let api_key = api_key_env
            .and_then(|var| std::env::var(var).ok())
            .filter(|k| !k.is_empty());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpEndpoint {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            agent,
        }
    }

    pub fn post_json(&self, path: &str, body: &Value) -> Result<Value, ClientError> {
        let url = format!("{}/{}", self.base_url, path.trim_start_matches('/'));
        debug!(%url, "POST");
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let payload = serde_json::to_vec(body).map_err(|e| ClientError::Protocol(e.to_string()))?;
        let mut resp = req
            .send(&payload[..])
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let code = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        if !(200..300).contains(&code) {
            return Err(ClientError::Status { code, body: text });
        }
        serde_json::from_str(&text).map_err(|e| ClientError::Protocol(e.to_string()))
    }
}

/// Chat client for any OpenAI-compatible `/chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct OpenAiChat {
    endpoint: HttpEndpoint,
}

impl OpenAiChat {
    pub fn new(endpoint: HttpEndpoint) -> Self {
        OpenAiChat { endpoint }
    }
}

impl ChatClient for OpenAiChat {
    fn chat(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let body = serde_json::to_value(request).map_err(|e| ClientError::Protocol(e.to_string()))?;
        let resp = self.endpoint.post_json("chat/completions", &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ClientError::Protocol(format!("no message content in {resp}")))
    }
}

/// Build an embeddings request body.
pub fn embeddings_body(model: &str, input: &[&str]) -> Value {
    json!({ "model": model, "input": input })
}

/// Extract vectors from an embeddings response, ordered by `index`.
pub fn parse_embeddings(resp: &Value, expected: usize) -> Result<Vec<Vec<f32>>, ClientError> {
    let data = resp
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| ClientError::Protocol("missing data array".into()))?;
    let mut out: Vec<Option<Vec<f32>>> = vec![None; expected];
    for (pos, item) in data.iter().enumerate() {
        let idx = item
            .get("index")
            .and_then(Value::as_u64)
            .map(|i| i as usize)
            .unwrap_or(pos);
        let vec = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| ClientError::Protocol("missing embedding".into()))?
            .iter()
            .map(|v| v.as_f64().map(|f| f as f32))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| ClientError::Protocol("non-numeric embedding".into()))?;
        if idx >= expected {
            return Err(ClientError::Protocol(format!("embedding index {idx} out of range")));
        }
        out[idx] = Some(vec);
    }
    out.into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| ClientError::Protocol(format!("expected {expected} embeddings")))
}
