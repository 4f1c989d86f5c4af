//! Text-generation backends.
//!
//! One [`Backend`] trait serves knowledge extraction, response generation and
//! reference scoring. Logprobs are always natural-log values.

mod mock;
mod remote;

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::{MockBackend, MockFallback, MockRule, MockTable, RuleMatcher};
pub use remote::{ChatRequestBody, Dialect, LogprobBase, RemoteBackend, RemoteOptions};

/// Decoding configuration. Defaults are top-p 0.3, top-k 30, temperature
/// 0.7, repetition penalty 1.0 (a no-op), 256 input and 40 output tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub top_p: f64,
    pub top_k: u32,
    pub temperature: f64,
    pub repetition_penalty: f64,
    pub max_input_tokens: usize,
    pub max_output_tokens: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            top_p: 0.3,
            top_k: 30,
            temperature: 0.7,
            repetition_penalty: 1.0,
            max_input_tokens: 256,
            max_output_tokens: 40,
        }
    }
}

impl GenerationConfig {
    /// Preset for term extraction: near-greedy decoding with room for a
    /// JSON list and a full prompt.
    pub fn extraction() -> Self {
        GenerationConfig {
            top_p: 1.0,
            top_k: 1,
            temperature: 1.0,
            repetition_penalty: 1.0,
            max_input_tokens: 4096,
            max_output_tokens: 256,
        }
    }

    /// Returns `(field, message)` pairs for every violated constraint.
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            out.push(("top_p", format!("must be in (0, 1], got {}", self.top_p)));
        }
        if self.top_k < 1 {
            out.push(("top_k", "must be at least 1".to_string()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            out.push(("temperature", format!("must be positive, got {}", self.temperature)));
        }
        if !(self.repetition_penalty > 0.0 && self.repetition_penalty.is_finite()) {
            out.push((
                "repetition_penalty",
                format!("must be positive, got {}", self.repetition_penalty),
            ));
        }
        if self.max_input_tokens == 0 {
            out.push(("max_input_tokens", "must be at least 1".to_string()));
        }
        if self.max_output_tokens == 0 {
            out.push(("max_output_tokens", "must be at least 1".to_string()));
        }
        out
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.violations().first() {
            None => Ok(()),
            Some((field, msg)) => Err(BackendError::InvalidConfig(format!("{field} {msg}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub config: GenerationConfig,
    pub want_logprobs: bool,
    /// Caller-side correlation key (e.g. `conversation#turn`). Never sent
    /// over the wire; mock rule tables may match on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, config: GenerationConfig) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            config,
            want_logprobs: false,
            key: None,
        }
    }

    pub fn with_logprobs(mut self, want: bool) -> Self {
        self.want_logprobs = want;
        self
    }

    pub fn with_key(mut self, key: impl Into<String>) -> Self {
        self.key = Some(key.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
    /// Config fields the protocol could not carry.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unsupported_fields: Vec<String>,
    /// Set when logprobs were requested but not returned.
    #[serde(default)]
    pub logprobs_unavailable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default)]
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("backend rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout => true,
            BackendError::Rejected { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait Backend: Send + Sync {
    /// Human-readable identity, recorded next to any score it produced.
    fn label(&self) -> String;

    fn complete(&self, request: &CompletionRequest) -> Result<BackendResponse, BackendError>;

    /// Per-token logprobs of `continuation` given `prompt`, or `None` when
    /// the backend cannot score supplied text.
    fn score(&self, _prompt: &str, _continuation: &str) -> Result<Option<Vec<TokenLogprob>>, BackendError> {
        Ok(None)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn label(&self) -> String {
        (**self).label()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete(request)
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<Option<Vec<TokenLogprob>>, BackendError> {
        (**self).score(prompt, continuation)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn label(&self) -> String {
        (**self).label()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete(request)
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<Option<Vec<TokenLogprob>>, BackendError> {
        (**self).score(prompt, continuation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 250,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        RetryPolicy {
            attempts,
            base_delay_ms: 0,
        }
    }
}

/// Calls `backend` up to `policy.attempts` times, doubling the delay after
/// each retryable failure.
pub fn complete_with_retry(
    backend: &dyn Backend,
    request: &CompletionRequest,
    policy: &RetryPolicy,
) -> Result<BackendResponse, BackendError> {
    if request.prompt.trim().is_empty() {
        return Err(BackendError::EmptyPrompt);
    }
    request.config.validate()?;
    let attempts = policy.attempts.max(1);
    let mut delay = Duration::from_millis(policy.base_delay_ms);
    let mut attempt = 1;
    loop {
        match backend.complete(request) {
            Ok(resp) => return check_logprobs(resp),
            Err(e) if e.is_retryable() && attempt < attempts => {
                tracing::warn!(backend = %backend.label(), attempt, error = %e, "retrying backend call");
                if !delay.is_zero() {
                    thread::sleep(delay);
                }
                delay *= 2;
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn check_logprobs(resp: BackendResponse) -> Result<BackendResponse, BackendError> {
    if let Some(lps) = &resp.token_logprobs {
        if let Some(bad) = lps.iter().find(|t| t.logprob.is_nan() || t.logprob > 0.0) {
            return Err(BackendError::Protocol(format!(
                "token {:?} has logprob {} > 0",
                bad.token, bad.logprob
            )));
        }
    }
    Ok(resp)
}
