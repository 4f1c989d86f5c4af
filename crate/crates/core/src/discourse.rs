//! Discourse context windows: the `n` utterances that precede a target
//! utterance, which bound where cognitive knowledge for it may come from.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Conversation, Utterance};

pub const DEFAULT_SPAN: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WindowError {
    #[error("utterance index {psi} out of range 1..={len}")]
    IndexOutOfRange { psi: usize, len: usize },
    #[error("window span must be at least 1")]
    ZeroSpan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub conversation_id: String,
    pub target_index: usize,
    pub span: usize,
    /// Oldest first; never includes the target utterance.
    pub members: Vec<Utterance>,
    pub rendered_text: String,
}

/// Location of a term inside a window's `rendered_text`, in character
/// (not byte) offsets, end exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermSpan {
    pub utterance_index: usize,
    pub start: usize,
    pub end: usize,
}

/// Window for utterance `psi` of `conv` with span `n`.
pub fn window(conv: &Conversation, psi: usize, span: usize) -> Result<ContextWindow, WindowError> {
    window_over(&conv.id, &conv.utterances, psi, span)
}

/// Same as [`window`] over a bare transcript (used by live sessions).
pub fn window_over(
    conversation_id: &str,
    utterances: &[Utterance],
    psi: usize,
    span: usize,
) -> Result<ContextWindow, WindowError> {
    if span == 0 {
        return Err(WindowError::ZeroSpan);
    }
    if psi == 0 || psi > utterances.len() {
        return Err(WindowError::IndexOutOfRange {
            psi,
            len: utterances.len(),
        });
    }
    let size = span.min(psi - 1);
    let members = utterances[psi - 1 - size..psi - 1].to_vec();
    let rendered_text = render(&members);
    Ok(ContextWindow {
        conversation_id: conversation_id.to_string(),
        target_index: psi,
        span,
        members,
        rendered_text,
    })
}

fn member_prefix(u: &Utterance) -> String {
    format!("{}: ", u.speaker.tag())
}

fn render(members: &[Utterance]) -> String {
    members
        .iter()
        .map(|u| format!("{}{}", member_prefix(u), u.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Lowercased, whitespace-collapsed characters, each paired with the
/// character offset it came from in the original string.
fn normalize_with_map(text: &str) -> Vec<(char, usize)> {
    let mut out = Vec::with_capacity(text.len());
    let mut in_space = false;
    for (i, ch) in text.chars().enumerate() {
        if ch.is_whitespace() {
            if !in_space {
                out.push((' ', i));
                in_space = true;
            }
            continue;
        }
        in_space = false;
        for lower in ch.to_lowercase() {
            out.push((lower, i));
        }
    }
    out
}

/// Normalized form used for provenance comparisons.
pub fn normalize_term(term: &str) -> String {
    normalize_with_map(term.trim()).into_iter().map(|(c, _)| c).collect()
}

impl ContextWindow {
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn member_indices(&self) -> Vec<usize> {
        self.members.iter().map(|u| u.index).collect()
    }

    /// Character range of each member's text (prefix excluded) inside
    /// `rendered_text`.
    pub fn member_ranges(&self) -> Vec<(usize, std::ops::Range<usize>)> {
        let mut offset = 0;
        let mut ranges = Vec::with_capacity(self.members.len());
        for u in &self.members {
            let start = offset + member_prefix(u).chars().count();
            let end = start + u.text.chars().count();
            ranges.push((u.index, start..end));
            offset = end + 1;
        }
        ranges
    }

    /// First case-insensitive, whitespace-normalized occurrence of `term`
    /// inside a member's text. Role tags and line breaks between members
    /// are never part of a match.
    pub fn locate(&self, term: &str) -> Option<TermSpan> {
        let needle: Vec<char> = normalize_term(term).chars().collect();
        if needle.is_empty() {
            return None;
        }
        for (u, (index, range)) in self.members.iter().zip(self.member_ranges()) {
            let hay = normalize_with_map(&u.text);
            if needle.len() > hay.len() {
                continue;
            }
            let found = (0..=hay.len() - needle.len())
                .find(|&i| hay[i..i + needle.len()].iter().map(|(c, _)| *c).eq(needle.iter().copied()));
            if let Some(pos) = found {
                return Some(TermSpan {
                    utterance_index: index,
                    start: range.start + hay[pos].1,
                    end: range.start + hay[pos + needle.len() - 1].1 + 1,
                });
            }
        }
        None
    }

    /// Substring of `rendered_text` by character offsets.
    pub fn slice(&self, start: usize, end: usize) -> String {
        self.rendered_text.chars().skip(start).take(end.saturating_sub(start)).collect()
    }

    /// Index of the member whose rendered line contains character `offset`.
    pub fn utterance_at(&self, offset: usize) -> Option<usize> {
        let mut line_start = 0;
        for u in &self.members {
            let line_end = line_start + member_prefix(u).chars().count() + u.text.chars().count();
            if offset < line_end + 1 {
                return Some(u.index);
            }
            line_start = line_end + 1;
        }
        None
    }
}
