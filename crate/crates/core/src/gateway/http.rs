//! Clients for embeddings / chat-completions style JSON endpoints.

use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{Completion, DecodeConfig, EncoderBackend, LmBackend, TokenLogprob};
use crate::{Error, Result};

pub const ENV_EMBED_URL: &str = "EPIC_EMBED_URL";
pub const ENV_LM_URL: &str = "EPIC_LM_URL";
pub const ENV_API_KEY: &str = "EPIC_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            initial_backoff: Duration::from_millis(250),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub url: String,
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl HttpConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key: None,
            model: None,
            timeout: Duration::from_secs(30),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = Some(model.into());
        self
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }
}

struct Transport {
    client: Client,
    config: HttpConfig,
    retries: AtomicU64,
}

enum Attempt {
    Retryable(String),
    Fatal(Error),
}

impl Transport {
    fn new(config: HttpConfig) -> Result<Self> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::BackendUnavailable(e.to_string()))?;
        Ok(Self {
            client,
            config,
            retries: AtomicU64::new(0),
        })
    }

    fn attempt(&self, body: &Value) -> std::result::Result<Value, Attempt> {
        let mut req = self.client.post(&self.config.url).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retryable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            return Err(Attempt::Retryable(format!("server returned {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(Error::ProtocolError(format!(
                "server returned {status}"
            ))));
        }
        let text = resp.text().map_err(|e| Attempt::Retryable(e.to_string()))?;
        serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(Error::ProtocolError(format!("invalid JSON body: {e}"))))
    }

    fn post(&self, body: &Value) -> Result<Value> {
        let policy = self.config.retry;
        let mut backoff = policy.initial_backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(msg)) if attempt < policy.max_retries => {
                    attempt += 1;
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    tracing::warn!(url = %self.config.url, attempt, error = %msg, "retrying request");
                    thread::sleep(backoff);
                    backoff *= 2;
                }
                Err(Attempt::Retryable(msg)) => {
                    return Err(Error::BackendUnavailable(format!(
                        "{} after {} retries: {msg}",
                        self.config.url, policy.max_retries
                    )))
                }
            }
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
    index: Option<usize>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

/// Encoder behind an endpoint accepting `{"input": [...]}` and answering
/// `{"data": [{"embedding": [...]}, ...]}`.
pub struct HttpEncoder {
    transport: Transport,
    dim: usize,
    fingerprint: String,
}

impl HttpEncoder {
    pub fn new(config: HttpConfig, dim: usize) -> Result<Self> {
        let fingerprint = format!(
            "http:{}:{}:dim={dim}",
            config.url,
            config.model.as_deref().unwrap_or("default")
        );
        Ok(Self {
            transport: Transport::new(config)?,
            dim,
            fingerprint,
        })
    }

    /// Number of retried requests since construction.
    pub fn retries(&self) -> u64 {
        self.transport.retries.load(Ordering::Relaxed)
    }
}

impl EncoderBackend for HttpEncoder {
    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut body = json!({ "input": texts });
        if let Some(model) = &self.transport.config.model {
            body["model"] = json!(model);
        }
        let value = self.transport.post(&body)?;
        let mut resp: EmbeddingResponse = serde_json::from_value(value)
            .map_err(|e| Error::ProtocolError(format!("unexpected embeddings body: {e}")))?;
        if resp.data.len() != texts.len() {
            return Err(Error::ProtocolError(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                resp.data.len()
            )));
        }
        if resp.data.iter().all(|d| d.index.is_some()) {
            resp.data.sort_by_key(|d| d.index);
        }
        resp.data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.dim {
                    return Err(Error::ProtocolError(format!(
                        "expected embedding of dim {}, got {}",
                        self.dim,
                        d.embedding.len()
                    )));
                }
                Ok(d.embedding)
            })
            .collect()
    }
}

/// Chat-completions client issuing one user message per call.
pub struct HttpLm {
    transport: Transport,
    decode: DecodeConfig,
    fingerprint: String,
}

impl HttpLm {
    pub fn new(config: HttpConfig, decode: DecodeConfig) -> Result<Self> {
        let fingerprint = format!(
            "http:{}:{}",
            config.url,
            config.model.as_deref().unwrap_or("default")
        );
        Ok(Self {
            transport: Transport::new(config)?,
            decode,
            fingerprint,
        })
    }

    pub fn retries(&self) -> u64 {
        self.transport.retries.load(Ordering::Relaxed)
    }
}

fn parse_completion(value: &Value) -> Result<Completion> {
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| Error::ProtocolError("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .ok_or_else(|| Error::ProtocolError("choice has no message content".into()))?
        .to_string();
    let logprobs = choice
        .pointer("/logprobs/content")
        .and_then(Value::as_array)
        .map(|tokens| {
            tokens
                .iter()
                .filter_map(|t| {
                    Some(TokenLogprob {
                        token: t.get("token")?.as_str()?.to_string(),
                        logprob: t.get("logprob")?.as_f64()?,
                    })
                })
                .collect()
        });
    Ok(Completion { text, logprobs })
}

impl LmBackend for HttpLm {
    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn decode_config(&self) -> DecodeConfig {
        self.decode
    }

    fn complete(&self, prompt: &str) -> Result<Completion> {
        let mut body = json!({
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": self.decode.temperature,
            "max_tokens": self.decode.max_tokens,
            "logprobs": true,
        });
        if let Some(model) = &self.transport.config.model {
            body["model"] = json!(model);
        }
        let value = self.transport.post(&body)?;
        parse_completion(&value)
    }
}
