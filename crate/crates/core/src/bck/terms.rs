//! Parsing backend term lists and validating them against the window.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::discourse::{normalize_term, ContextWindow};

pub const NONE_SENTINEL: &str = "none";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedTerms {
    pub terms: Vec<String>,
    /// The output could not be read as a term list.
    pub malformed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NotInWindow,
    Duplicate,
    Empty,
    Sentinel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermRejection {
    pub term: String,
    pub reason: RejectReason,
}

fn is_sentinel(s: &str) -> bool {
    let t = s.trim().trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c == '`');
    t.eq_ignore_ascii_case(NONE_SENTINEL)
}

fn strip_code_fence(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.split_once('\n').map(|(_, body)| body).unwrap_or("");
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

fn strip_list_marker(line: &str) -> &str {
    let t = line.trim();
    for bullet in ["- ", "* ", "• "] {
        if let Some(r) = t.strip_prefix(bullet) {
            return r.trim();
        }
    }
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let r = &t[digits..];
        if let Some(r) = r.strip_prefix(". ").or_else(|| r.strip_prefix(") ")) {
            return r.trim();
        }
    }
    t
}

fn unquote(s: &str) -> &str {
    let t = s.trim();
    for q in ['"', '\''] {
        if t.len() >= 2 && t.starts_with(q) && t.ends_with(q) {
            return &t[1..t.len() - 1];
        }
    }
    t
}

/// Reads a backend answer as a term list. Accepts a JSON array of strings
/// (optionally inside a code fence), the `none` sentinel, or a newline- or
/// comma-separated list. Never fails: unreadable output yields an empty,
/// `malformed` result.
pub fn parse_terms(raw: &str) -> ParsedTerms {
    let body = strip_code_fence(raw);
    if body.is_empty() || is_sentinel(body) {
        return ParsedTerms::default();
    }
    if body.starts_with('[') || body.starts_with('{') {
        return match serde_json::from_str::<Value>(body) {
            Ok(Value::Array(items)) => {
                let mut terms = Vec::with_capacity(items.len());
                for item in items {
                    match item {
                        Value::String(s) => terms.push(s),
                        _ => return ParsedTerms { terms: Vec::new(), malformed: true },
                    }
                }
                ParsedTerms { terms, malformed: false }
            }
            _ => ParsedTerms { terms: Vec::new(), malformed: true },
        };
    }
    let lines: Vec<&str> = body.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let pieces: Vec<&str> = if lines.len() > 1 {
        lines.into_iter().map(strip_list_marker).collect()
    } else {
        body.split(',').collect()
    };
    ParsedTerms {
        terms: pieces.into_iter().map(|p| unquote(p).to_string()).collect(),
        malformed: false,
    }
}

/// Keeps terms that occur in a member of `window` (case-insensitive,
/// whitespace-normalized). Accepted terms are stored as the window's own
/// substring, so they keep the source casing.
pub fn validate_terms(window: &ContextWindow, candidates: &[String]) -> (Vec<String>, Vec<TermRejection>) {
    let mut accepted: Vec<String> = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    let mut rejected = Vec::new();
    for cand in candidates {
        let reject = |reason| TermRejection {
            term: cand.clone(),
            reason,
        };
        let norm = normalize_term(cand);
        if norm.is_empty() {
            rejected.push(reject(RejectReason::Empty));
            continue;
        }
        if is_sentinel(cand) {
            rejected.push(reject(RejectReason::Sentinel));
            continue;
        }
        if seen.contains(&norm) {
            rejected.push(reject(RejectReason::Duplicate));
            continue;
        }
        match window.locate(cand) {
            Some(span) => {
                seen.push(norm);
                accepted.push(window.slice(span.start, span.end));
            }
            None => rejected.push(reject(RejectReason::NotInWindow)),
        }
    }
    (accepted, rejected)
}
