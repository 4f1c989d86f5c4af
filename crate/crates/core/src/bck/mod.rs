//! Bidirectional cognitive knowledge (BCK): per-utterance term lists for
//! three cognitive components, extracted from the discourse window by
//! prompting a backend and kept only when they occur verbatim in it.

mod prompt;
mod store;
mod terms;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{complete_with_retry, Backend, BackendError, CompletionRequest, GenerationConfig, RetryPolicy};
use crate::corpus::Speaker;
use crate::discourse::{ContextWindow, TermSpan, WindowError};

pub use prompt::{build_prompt, prompt_version, ExtractionPrompt};
pub use store::{
    extract_corpus, term_stats, window_digest, BckStore, CacheKey, CacheRecord, ComponentStats, CorpusExtraction,
    ExtractOptions, ExtractionCache, Ratio, TermStats,
};
pub use terms::{parse_terms, validate_terms, ParsedTerms, RejectReason, TermRejection, NONE_SENTINEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CognitiveComponent {
    Btm,
    Peu,
    Bcr,
}

impl CognitiveComponent {
    pub const ALL: [CognitiveComponent; 3] = [CognitiveComponent::Btm, CognitiveComponent::Peu, CognitiveComponent::Bcr];

    pub fn as_str(self) -> &'static str {
        match self {
            CognitiveComponent::Btm => "btm",
            CognitiveComponent::Peu => "peu",
            CognitiveComponent::Bcr => "bcr",
        }
    }
}

impl fmt::Display for CognitiveComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CognitiveComponent {
    type Err = BckError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "btm" => Ok(CognitiveComponent::Btm),
            "peu" => Ok(CognitiveComponent::Peu),
            "bcr" => Ok(CognitiveComponent::Bcr),
            other => Err(BckError::UnknownComponent(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perspective {
    SystemSide,
    UserSide,
}

impl Perspective {
    pub const ALL: [Perspective; 2] = [Perspective::SystemSide, Perspective::UserSide];

    pub fn as_str(self) -> &'static str {
        match self {
            Perspective::SystemSide => "system_side",
            Perspective::UserSide => "user_side",
        }
    }
}

impl fmt::Display for Perspective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<Speaker> for Perspective {
    fn from(s: Speaker) -> Self {
        match s {
            Speaker::System => Perspective::SystemSide,
            Speaker::User => Perspective::UserSide,
        }
    }
}

#[derive(Debug, Error)]
pub enum BckError {
    #[error("window for {conversation_id}#{utterance_index} is empty")]
    EmptyWindow { conversation_id: String, utterance_index: usize },
    #[error("extraction of {component} for {conversation_id}#{utterance_index} failed: {source}")]
    Backend {
        conversation_id: String,
        utterance_index: usize,
        component: CognitiveComponent,
        #[source]
        source: BackendError,
    },
    #[error("conversation {conversation_id}: {source}")]
    Window {
        conversation_id: String,
        #[source]
        source: WindowError,
    },
    #[error("cache {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("store {path}: {message}")]
    Store { path: String, message: String },
    #[error("unknown cognitive component {0:?}")]
    UnknownComponent(String),
    #[error("term statistics need at least one extraction over a non-empty window")]
    EmptyStore,
    #[error("concurrency must be at least 1")]
    ZeroConcurrency,
    #[error("worker pool: {0}")]
    Pool(String),
}

/// One perspective's BCK for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BckTriplet {
    pub conversation_id: String,
    pub utterance_index: usize,
    pub perspective: Perspective,
    pub btm_terms: Vec<String>,
    pub peu_terms: Vec<String>,
    pub bcr_terms: Vec<String>,
    pub source_window: ContextWindow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermProvenance {
    pub component: CognitiveComponent,
    pub term: String,
    #[serde(flatten)]
    pub span: TermSpan,
}

impl BckTriplet {
    pub fn empty(window: ContextWindow, perspective: Perspective) -> Self {
        BckTriplet {
            conversation_id: window.conversation_id.clone(),
            utterance_index: window.target_index,
            perspective,
            btm_terms: Vec::new(),
            peu_terms: Vec::new(),
            bcr_terms: Vec::new(),
            source_window: window,
        }
    }

    pub fn terms(&self, component: CognitiveComponent) -> &[String] {
        match component {
            CognitiveComponent::Btm => &self.btm_terms,
            CognitiveComponent::Peu => &self.peu_terms,
            CognitiveComponent::Bcr => &self.bcr_terms,
        }
    }

    pub fn terms_mut(&mut self, component: CognitiveComponent) -> &mut Vec<String> {
        match component {
            CognitiveComponent::Btm => &mut self.btm_terms,
            CognitiveComponent::Peu => &mut self.peu_terms,
            CognitiveComponent::Bcr => &mut self.bcr_terms,
        }
    }

    pub fn is_empty(&self) -> bool {
        CognitiveComponent::ALL.iter().all(|c| self.terms(*c).is_empty())
    }

    /// Offsets of every term inside `source_window.rendered_text`, in
    /// component order. Terms that no longer resolve are skipped.
    pub fn provenance(&self) -> Vec<TermProvenance> {
        CognitiveComponent::ALL
            .iter()
            .flat_map(|&c| {
                self.terms(c).iter().filter_map(move |t| {
                    self.source_window.locate(t).map(|span| TermProvenance {
                        component: c,
                        term: t.clone(),
                        span,
                    })
                })
            })
            .collect()
    }

    /// Terms that do not occur in the source window. Empty for any triplet
    /// produced by extraction.
    pub fn unresolved_terms(&self) -> Vec<(CognitiveComponent, String)> {
        CognitiveComponent::ALL
            .iter()
            .flat_map(|&c| {
                self.terms(c)
                    .iter()
                    .filter(|t| self.source_window.locate(t).is_none())
                    .map(move |t| (c, t.clone()))
            })
            .collect()
    }
}

/// Outcome of one (component, perspective) subtask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentExtraction {
    pub component: CognitiveComponent,
    pub accepted: Vec<String>,
    pub rejected: Vec<TermRejection>,
    pub raw: String,
    pub malformed: bool,
}

/// Correlation key carried by extraction requests, `conv#psi/component/perspective`.
pub fn request_key(window: &ContextWindow, component: CognitiveComponent, perspective: Perspective) -> String {
    format!("{}#{}/{}/{}", window.conversation_id, window.target_index, component, perspective)
}

/// Runs one subtask against the backend and validates its terms.
pub fn extract_component(
    window: &ContextWindow,
    component: CognitiveComponent,
    perspective: Perspective,
    backend: &dyn Backend,
    config: &GenerationConfig,
    retry: &RetryPolicy,
) -> Result<ComponentExtraction, BckError> {
    let prompt = build_prompt(window, component, perspective)?;
    let request = CompletionRequest::new(prompt.render(), *config).with_key(request_key(window, component, perspective));
    let response = complete_with_retry(backend, &request, retry).map_err(|source| BckError::Backend {
        conversation_id: window.conversation_id.clone(),
        utterance_index: window.target_index,
        component,
        source,
    })?;
    let parsed = parse_terms(&response.text);
    if parsed.malformed {
        tracing::warn!(
            conversation = %window.conversation_id,
            utterance = window.target_index,
            %component,
            raw = %response.text,
            "unreadable term list treated as empty"
        );
    }
    let (accepted, rejected) = validate_terms(window, &parsed.terms);
    for r in &rejected {
        tracing::warn!(
            conversation = %window.conversation_id,
            utterance = window.target_index,
            %component,
            term = %r.term,
            reason = ?r.reason,
            "rejected extracted term"
        );
    }
    Ok(ComponentExtraction {
        component,
        accepted,
        rejected,
        raw: response.text,
        malformed: parsed.malformed,
    })
}

/// Triplet for the utterance at `window.target_index`, plus the per-subtask
/// details. An empty window yields an empty triplet without backend calls.
pub fn extract_triplet_detailed(
    window: &ContextWindow,
    perspective: Perspective,
    backend: &dyn Backend,
    config: &GenerationConfig,
    retry: &RetryPolicy,
) -> Result<(BckTriplet, Vec<ComponentExtraction>), BckError> {
    let mut triplet = BckTriplet::empty(window.clone(), perspective);
    if window.is_empty() {
        return Ok((triplet, Vec::new()));
    }
    let mut details = Vec::with_capacity(3);
    for component in CognitiveComponent::ALL {
        let ex = extract_component(window, component, perspective, backend, config, retry)?;
        *triplet.terms_mut(component) = ex.accepted.clone();
        details.push(ex);
    }
    Ok((triplet, details))
}

pub fn extract_triplet(
    window: &ContextWindow,
    perspective: Perspective,
    backend: &dyn Backend,
) -> Result<BckTriplet, BckError> {
    extract_triplet_detailed(window, perspective, backend, &GenerationConfig::extraction(), &RetryPolicy::default())
        .map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockFallback, RuleMatcher};
    use crate::corpus::Utterance;
    use crate::discourse::window_over;

    fn transcript() -> Vec<Utterance> {
        vec![
            Utterance::new(1, Speaker::User, "I lost my job last week"),
            Utterance::new(2, Speaker::System, "I am sorry, that must be hard"),
            Utterance::new(3, Speaker::User, "It is"),
        ]
    }

    #[test]
    fn btm_rejects_non_verbatim_terms() {
        let w = window_over("c", &transcript(), 3, 5).unwrap();
        let backend = MockBackend::standard()
            .with_rule(
                RuleMatcher::Contains("developing its ToM about the system".into()),
                r#"["lost my job", "none-such-phrase"]"#,
            )
            .with_fallback(MockFallback::Fixed("none".into()));
        let (t, details) = extract_triplet_detailed(
            &w,
            Perspective::UserSide,
            &backend,
            &GenerationConfig::extraction(),
            &RetryPolicy::immediate(1),
        )
        .unwrap();
        assert_eq!(t.btm_terms, vec!["lost my job"]);
        assert!(t.peu_terms.is_empty() && t.bcr_terms.is_empty());
        assert_eq!(details[0].rejected.len(), 1);
        assert_eq!(details[0].rejected[0].term, "none-such-phrase");
        assert_eq!(backend.call_count(), 3);
    }

    #[test]
    fn empty_window_makes_no_calls() {
        let w = window_over("c", &transcript(), 1, 5).unwrap();
        let backend = MockBackend::standard();
        let t = extract_triplet(&w, Perspective::UserSide, &backend).unwrap();
        assert!(t.is_empty());
        assert_eq!(backend.call_count(), 0);
    }

    #[test]
    fn none_everywhere_gives_empty_lists() {
        let w = window_over("c", &transcript(), 3, 5).unwrap();
        let backend = MockBackend::standard().with_fallback(MockFallback::Fixed("none".into()));
        let t = extract_triplet(&w, Perspective::SystemSide, &backend).unwrap();
        assert!(t.is_empty());
        assert_eq!(backend.call_count(), 3);
    }

    #[test]
    fn malformed_output_is_empty_not_fatal() {
        let w = window_over("c", &transcript(), 3, 5).unwrap();
        let backend = MockBackend::standard().with_fallback(MockFallback::Fixed("[\"broken".into()));
        let (t, d) = extract_triplet_detailed(
            &w,
            Perspective::SystemSide,
            &backend,
            &GenerationConfig::extraction(),
            &RetryPolicy::immediate(1),
        )
        .unwrap();
        assert!(t.is_empty());
        assert!(d.iter().all(|c| c.malformed));
    }

    #[test]
    fn requests_carry_correlation_keys() {
        let w = window_over("c", &transcript(), 2, 5).unwrap();
        let backend = MockBackend::standard();
        extract_triplet(&w, Perspective::SystemSide, &backend).unwrap();
        let keys: Vec<_> = backend.calls().into_iter().filter_map(|r| r.key).collect();
        assert_eq!(keys, vec!["c#2/btm/system_side", "c#2/peu/system_side", "c#2/bcr/system_side"]);
    }

    #[test]
    fn provenance_resolves_stored_terms() {
        let w = window_over("c", &transcript(), 3, 5).unwrap();
        let mut t = BckTriplet::empty(w, Perspective::UserSide);
        t.btm_terms = vec!["lost my job".into()];
        t.bcr_terms = vec!["must be hard".into()];
        let p = t.provenance();
        assert_eq!(p.len(), 2);
        for entry in &p {
            assert_eq!(t.source_window.slice(entry.span.start, entry.span.end), entry.term);
        }
        assert_eq!(p[1].span.utterance_index, 2);
        t.peu_terms = vec!["invented".into()];
        assert_eq!(t.unresolved_terms(), vec![(CognitiveComponent::Peu, "invented".to_string())]);
    }

    #[test]
    fn transport_failure_names_the_subtask() {
        struct Down;
        impl Backend for Down {
            fn label(&self) -> String {
                "down".into()
            }
            fn complete(&self, _: &CompletionRequest) -> Result<crate::backend::BackendResponse, BackendError> {
                Err(BackendError::Transport("refused".into()))
            }
        }
        let w = window_over("c", &transcript(), 3, 5).unwrap();
        let err = extract_triplet_detailed(
            &w,
            Perspective::UserSide,
            &Down,
            &GenerationConfig::extraction(),
            &RetryPolicy::immediate(2),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            BckError::Backend { ref conversation_id, utterance_index: 3, component: CognitiveComponent::Btm, .. }
                if conversation_id == "c"
        ));
    }
}
