//! JSON-over-HTTP chat-completion client.
//!
//! Request body (field order is stable, see `wire_body_is_stable`):
//!
//! ```json
//! {"model":"m","messages":[{"role":"user","content":"..."}],
//!  "temperature":0.7,"top_p":0.3,"top_k":30,"repetition_penalty":1.0,
//!  "max_tokens":40,"logprobs":false}
//! ```
//!
//! The response is read from `choices[0].message.content`, with optional
//! `choices[0].logprobs.content[*].{token,logprob}` and `usage`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendResponse, CompletionRequest, TokenLogprob, Usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    /// Sends every sampling field, including `top_k` and
    /// `repetition_penalty` (vLLM / TGI style servers).
    #[default]
    Extended,
    /// Only fields of the plain OpenAI schema.
    OpenAi,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogprobBase {
    #[default]
    Natural,
    Two,
    Ten,
}

impl LogprobBase {
    fn to_natural(self, lp: f64) -> f64 {
        match self {
            LogprobBase::Natural => lp,
            LogprobBase::Two => lp * std::f64::consts::LN_2,
            LogprobBase::Ten => lp * std::f64::consts::LN_10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteOptions {
    pub url: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default)]
    pub dialect: Dialect,
    #[serde(default)]
    pub logprob_base: LogprobBase,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    60
}

impl RemoteOptions {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteOptions {
            url: url.into(),
            model: model.into(),
            api_key: None,
            dialect: Dialect::default(),
            logprob_base: LogprobBase::default(),
            timeout_secs: default_timeout(),
        }
    }

    fn endpoint(&self) -> String {
        let base = self.url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequestBody {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetition_penalty: Option<f64>,
    pub max_tokens: usize,
    pub logprobs: bool,
}

impl ChatRequestBody {
    /// Wire body plus the config fields this dialect cannot carry.
    pub fn build(model: &str, request: &CompletionRequest, dialect: Dialect) -> (Self, Vec<String>) {
        let c = &request.config;
        let mut unsupported = vec!["max_input_tokens".to_string()];
        let (top_k, repetition_penalty) = match dialect {
            Dialect::Extended => (Some(c.top_k), Some(c.repetition_penalty)),
            Dialect::OpenAi => {
                unsupported.push("top_k".into());
                unsupported.push("repetition_penalty".into());
                (None, None)
            }
        };
        let body = ChatRequestBody {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: request.prompt.clone(),
            }],
            temperature: c.temperature,
            top_p: c.top_p,
            top_k,
            repetition_penalty,
            max_tokens: c.max_output_tokens,
            logprobs: request.want_logprobs,
        };
        (body, unsupported)
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<WireLogprob>>,
}

#[derive(Deserialize)]
struct WireLogprob {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

pub struct RemoteBackend {
    options: RemoteOptions,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("url", &self.options.url)
            .field("model", &self.options.model)
            .finish()
    }
}

impl RemoteBackend {
    pub fn new(options: RemoteOptions) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(options.timeout_secs))
            .build()
            .map_err(|e| BackendError::InvalidConfig(e.to_string()))?;
        Ok(RemoteBackend { options, client })
    }

    pub fn options(&self) -> &RemoteOptions {
        &self.options
    }

    fn parse(&self, raw: &str, want_logprobs: bool, unsupported: Vec<String>) -> Result<BackendResponse, BackendError> {
        let parsed: ChatResponse = serde_json::from_str(raw).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
        let text = choice
            .message
            .content
            .ok_or_else(|| BackendError::Protocol("choice has no message content".into()))?;
        let token_logprobs = if want_logprobs {
            choice.logprobs.and_then(|l| l.content).map(|entries| {
                entries
                    .into_iter()
                    .map(|e| TokenLogprob {
                        token: e.token,
                        logprob: self.options.logprob_base.to_natural(e.logprob),
                    })
                    .collect::<Vec<_>>()
            })
        } else {
            None
        };
        let usage = parsed.usage.unwrap_or(WireUsage {
            prompt_tokens: None,
            completion_tokens: None,
        });
        Ok(BackendResponse {
            usage: Usage {
                prompt_tokens: usage.prompt_tokens,
                completion_tokens: usage.completion_tokens,
                unsupported_fields: unsupported,
                logprobs_unavailable: want_logprobs && token_logprobs.is_none(),
            },
            text,
            token_logprobs,
        })
    }
}

impl Backend for RemoteBackend {
    fn label(&self) -> String {
        format!("{}@{}", self.options.model, self.options.url)
    }

    fn complete(&self, request: &CompletionRequest) -> Result<BackendResponse, BackendError> {
        if request.prompt.trim().is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        let (body, unsupported) = ChatRequestBody::build(&self.options.model, request, self.options.dialect);
        let mut call = self.client.post(self.options.endpoint()).json(&body);
        if let Some(key) = &self.options.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let raw = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(BackendError::Auth(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::Rejected {
                status: status.as_u16(),
                body: raw.chars().take(500).collect(),
            });
        }
        self.parse(&raw, request.want_logprobs, unsupported)
    }
}
