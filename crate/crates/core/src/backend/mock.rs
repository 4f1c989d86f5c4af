//! Deterministic in-process backend driven by a rule table.
//!
//! Rules are tried in order; the first match wins. Without a match the
//! fallback answers. [`MockFallback::Auto`] recognises extraction prompts
//! (an `Input:` / `Output:` block) and linearized generation prompts
//! (containing `[CLS]`) and produces well-formed answers for both, so the
//! whole pipeline can run offline.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, BackendResponse, CompletionRequest, TokenLogprob, Usage};
use crate::corpus::Strategy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleMatcher {
    /// Prompt contains the substring.
    Contains(String),
    /// Prompt equals the string exactly.
    Exact(String),
    /// Request correlation key equals the string.
    Key(String),
}

impl RuleMatcher {
    fn matches(&self, request: &CompletionRequest) -> bool {
        match self {
            RuleMatcher::Contains(s) => request.prompt.contains(s.as_str()),
            RuleMatcher::Exact(s) => request.prompt == *s,
            RuleMatcher::Key(k) => request.key.as_deref() == Some(k.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub matcher: RuleMatcher,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFallback {
    Fixed(String),
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockTable {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default = "default_fallback")]
    pub fallback: MockFallback,
    /// Logprob assigned to every whitespace token, when logprobs are on.
    #[serde(default)]
    pub uniform_logprob: Option<f64>,
}

fn default_fallback() -> MockFallback {
    MockFallback::Auto
}

impl Default for MockTable {
    fn default() -> Self {
        MockTable {
            rules: Vec::new(),
            fallback: MockFallback::Auto,
            uniform_logprob: None,
        }
    }
}

#[derive(Debug)]
pub struct MockBackend {
    name: String,
    table: MockTable,
    log: Mutex<Vec<CompletionRequest>>,
}

impl MockBackend {
    pub fn new(table: MockTable) -> Self {
        MockBackend {
            name: "mock".to_string(),
            table,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Auto fallback, no rules.
    pub fn standard() -> Self {
        Self::new(MockTable::default())
    }

    /// Rule table read from a JSON file.
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let table: MockTable = serde_json::from_str(&raw)
            .map_err(|e| BackendError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Ok(Self::new(table).named(format!("mock:{}", path.display())))
    }

    /// Answers each keyed request with the given text, e.g. the gold target
    /// for `conversation#turn`.
    pub fn keyed<I, K, V>(entries: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let rules = entries
            .into_iter()
            .map(|(k, v)| MockRule {
                matcher: RuleMatcher::Key(k.into()),
                response: v.into(),
            })
            .collect();
        Self::new(MockTable {
            rules,
            ..MockTable::default()
        })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_rule(mut self, matcher: RuleMatcher, response: impl Into<String>) -> Self {
        self.table.rules.push(MockRule {
            matcher,
            response: response.into(),
        });
        self
    }

    pub fn with_uniform_logprob(mut self, logprob: f64) -> Self {
        assert!(logprob <= 0.0, "logprobs must be <= 0");
        self.table.uniform_logprob = Some(logprob);
        self
    }

    pub fn with_fallback(mut self, fallback: MockFallback) -> Self {
        self.table.fallback = fallback;
        self
    }

    /// Every request received so far, in arrival order.
    pub fn calls(&self) -> Vec<CompletionRequest> {
        self.log.lock().expect("mock log poisoned").clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("mock log poisoned").len()
    }

    pub fn clear_calls(&self) {
        self.log.lock().expect("mock log poisoned").clear();
    }

    fn respond(&self, request: &CompletionRequest) -> String {
        if let Some(rule) = self.table.rules.iter().find(|r| r.matcher.matches(request)) {
            return rule.response.clone();
        }
        match &self.table.fallback {
            MockFallback::Fixed(text) => text.clone(),
            MockFallback::Auto => auto_response(&request.prompt),
        }
    }

    fn logprobs_for(&self, text: &str) -> Option<Vec<TokenLogprob>> {
        self.table.uniform_logprob.map(|lp| {
            text.split_whitespace()
                .map(|t| TokenLogprob {
                    token: t.to_string(),
                    logprob: lp,
                })
                .collect()
        })
    }
}

impl Backend for MockBackend {
    fn label(&self) -> String {
        self.name.clone()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<BackendResponse, BackendError> {
        if request.prompt.trim().is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        self.log.lock().expect("mock log poisoned").push(request.clone());
        let text = self.respond(request);
        let (token_logprobs, unavailable) = if request.want_logprobs {
            let lps = self.logprobs_for(&text);
            let missing = lps.is_none();
            (lps, missing)
        } else {
            (None, false)
        };
        Ok(BackendResponse {
            usage: Usage {
                prompt_tokens: Some(request.prompt.split_whitespace().count() as u64),
                completion_tokens: Some(text.split_whitespace().count() as u64),
                unsupported_fields: Vec::new(),
                logprobs_unavailable: unavailable,
            },
            text,
            token_logprobs,
        })
    }

    fn score(&self, _prompt: &str, continuation: &str) -> Result<Option<Vec<TokenLogprob>>, BackendError> {
        Ok(self.logprobs_for(continuation))
    }
}

fn digest64(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 has 32 bytes"))
}

fn auto_response(prompt: &str) -> String {
    if let Some(window) = input_block(prompt) {
        let subtask = prompt
            .lines()
            .find(|l| l.trim_start().starts_with("Step 2"))
            .unwrap_or("");
        return extractive_terms(&window, subtask);
    }
    if prompt.contains("[CLS]") {
        return templated_reply(prompt);
    }
    "none".to_string()
}

/// Lines between an `Input:` line and the following `Output:` line.
fn input_block(prompt: &str) -> Option<String> {
    let lines: Vec<&str> = prompt.lines().collect();
    let start = lines.iter().position(|l| l.trim() == "Input:")?;
    let end = start + 1 + lines[start + 1..].iter().position(|l| l.trim() == "Output:")?;
    Some(lines[start + 1..end].join("\n"))
}

const STOPWORDS: &[&str] = &[
    "about", "after", "again", "been", "being", "could", "does", "doing", "from", "have", "having", "into",
    "just", "like", "more", "much", "only", "really", "should", "some", "than", "that", "their", "them",
    "then", "there", "these", "they", "this", "those", "very", "were", "what", "when", "where", "which",
    "while", "with", "would", "your", "yours",
];

/// Picks up to three content words from the window, selected by a hash of
/// (subtask, word) so different subtasks pick different words.
fn extractive_terms(window: &str, subtask: &str) -> String {
    let mut picked: Vec<String> = Vec::new();
    for line in window.lines() {
        let body = line.split_once(": ").map(|(_, b)| b).unwrap_or(line);
        for raw in body.split_whitespace() {
            let word = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if word.chars().filter(|c| c.is_alphabetic()).count() < 4 {
                continue;
            }
            let lower = word.to_lowercase();
            if STOPWORDS.contains(&lower.as_str()) || picked.iter().any(|p| p.to_lowercase() == lower) {
                continue;
            }
            if digest64(&[subtask, &lower]).is_multiple_of(3) {
                picked.push(word.to_string());
            }
            if picked.len() == 3 {
                break;
            }
        }
        if picked.len() == 3 {
            break;
        }
    }
    if picked.is_empty() {
        "none".to_string()
    } else {
        serde_json::to_string(&picked).expect("strings serialize")
    }
}

/// `[str] <label> [rsp] <text>` built from the most recent history
/// utterance in a linearized input.
fn templated_reply(prompt: &str) -> String {
    let strategy = Strategy::ALL[(digest64(&[prompt]) % Strategy::ALL.len() as u64) as usize];
    let seq = prompt.rfind("[CLS]").map(|i| &prompt[i..]).unwrap_or(prompt);
    let alpha = seq.split("[cog]").next().unwrap_or(seq);
    let last = ["[usr]", "[sys]"]
        .iter()
        .filter_map(|m| alpha.rfind(m).map(|i| i + m.len()))
        .max()
        .map(|i| alpha[i..].trim())
        .unwrap_or("");
    let words: Vec<&str> = last.split_whitespace().take(8).collect();
    let response = if words.is_empty() {
        "Tell me more about how you are feeling.".to_string()
    } else {
        format!("I hear you. It sounds like {}.", words.join(" ").trim_end_matches(['.', '!', '?']))
    };
    format!("[str] {} [rsp] {}", strategy.label(), response)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::GenerationConfig;

    fn req(p: &str) -> CompletionRequest {
        CompletionRequest::new(p, GenerationConfig::default())
    }

    #[test]
    fn rule_matches_and_is_deterministic() {
        let m = MockBackend::standard().with_rule(RuleMatcher::Contains("GREETING".into()), "Hello!");
        for _ in 0..100 {
            assert_eq!(m.complete(&req("say GREETING now")).unwrap().text, "Hello!");
        }
        assert_eq!(m.call_count(), 100);
    }

    #[test]
    fn uniform_logprobs_pass_through() {
        let lp = 0.25f64.ln();
        let m = MockBackend::new(MockTable {
            fallback: MockFallback::Fixed("one two three".into()),
            ..MockTable::default()
        })
        .with_uniform_logprob(lp);
        let r = m.complete(&req("x").with_logprobs(true)).unwrap();
        let lps = r.token_logprobs.unwrap();
        assert_eq!(lps.len(), 3);
        assert!(lps.iter().all(|t| t.logprob == lp));
        assert!(!r.usage.logprobs_unavailable);
    }

    #[test]
    fn missing_logprobs_are_flagged_not_errors() {
        let m = MockBackend::standard();
        let r = m.complete(&req("x").with_logprobs(true)).unwrap();
        assert!(r.token_logprobs.is_none());
        assert!(r.usage.logprobs_unavailable);
    }

    #[test]
    fn keyed_rules_use_the_correlation_key() {
        let m = MockBackend::keyed([("c1#2", "[str] Question [rsp] Why?")]);
        assert_eq!(m.complete(&req("anything").with_key("c1#2")).unwrap().text, "[str] Question [rsp] Why?");
        assert_ne!(m.complete(&req("anything").with_key("c1#4")).unwrap().text, "[str] Question [rsp] Why?");
    }

    #[test]
    fn auto_extraction_returns_verbatim_words() {
        let prompt = "[ROLE]\nx\nStep 2: Perform something\nInput:\nUser: I lost my job last week and feel worthless\nSystem: That sounds painful\nOutput:\nJSON";
        let text = MockBackend::standard().complete(&req(prompt)).unwrap().text;
        if text != "none" {
            let terms: Vec<String> = serde_json::from_str(&text).unwrap();
            let window = "I lost my job last week and feel worthless That sounds painful";
            assert!(terms.iter().all(|t| window.contains(t.as_str())), "{terms:?}");
        }
    }

    #[test]
    fn auto_generation_is_well_formed() {
        let text = MockBackend::standard()
            .complete(&req("answer\n[CLS] [syp] exams [usr] I failed my test. [cog] [mind] none"))
            .unwrap()
            .text;
        assert!(text.starts_with("[str] "), "{text}");
        assert!(text.contains(" [rsp] I hear you. It sounds like I failed my test."), "{text}");
    }

    #[test]
    fn rule_table_deserializes() {
        let raw = r#"{"rules":[{"match":{"contains":"GREETING"},"response":"Hello!"}],"fallback":{"fixed":"none"}}"#;
        let table: MockTable = serde_json::from_str(raw).unwrap();
        assert_eq!(table.rules[0].matcher, RuleMatcher::Contains("GREETING".into()));
        assert_eq!(table.fallback, MockFallback::Fixed("none".into()));
    }
}
