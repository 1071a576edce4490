//! Client contracts for the sentence encoder and the language model.
//!
//! Both are object-safe traits so the pipeline can run against the HTTP
//! clients in [`http`] or the deterministic offline mocks in [`mock`].

pub mod http;
pub mod mock;

use serde::{Deserialize, Serialize};

use crate::Result;

pub use http::{HttpConfig, HttpEncoder, HttpLm, RetryPolicy};
pub use mock::{content_words, MockEncoder, MockLm, MockScript, DEFAULT_STOPWORDS};

/// Maps texts to raw (unnormalized) embeddings of a fixed width.
pub trait EncoderBackend: Send + Sync {
    /// Identifies the model and width; stored alongside profiles so stale
    /// embeddings can be detected.
    fn fingerprint(&self) -> &str;

    fn dim(&self) -> usize;

    /// One vector per input text, in input order.
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Completion {
    pub text: String,
    /// Per-token log-probabilities, when the backend exposes them.
    pub logprobs: Option<Vec<TokenLogprob>>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            logprobs: None,
        }
    }
}

/// Single-turn text completion.
pub trait LmBackend: Send + Sync {
    fn fingerprint(&self) -> &str;

    fn decode_config(&self) -> DecodeConfig;

    fn complete(&self, prompt: &str) -> Result<Completion>;
}

impl<E: EncoderBackend + ?Sized> EncoderBackend for &E {
    fn fingerprint(&self) -> &str {
        (**self).fingerprint()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        (**self).embed(texts)
    }
}

impl<L: LmBackend + ?Sized> LmBackend for &L {
    fn fingerprint(&self) -> &str {
        (**self).fingerprint()
    }
    fn decode_config(&self) -> DecodeConfig {
        (**self).decode_config()
    }
    fn complete(&self, prompt: &str) -> Result<Completion> {
        (**self).complete(prompt)
    }
}
