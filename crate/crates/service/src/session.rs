//! Session state, the per-turn pipeline and the wire types derived from it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use mind2_core::backend::{complete_with_retry, Backend, CompletionRequest, GenerationConfig, RetryPolicy};
use mind2_core::bck::{extract_triplet_detailed, BckError, BckTriplet, Perspective, TermProvenance};
use mind2_core::corpus::{Speaker, Strategy, Utterance};
use mind2_core::discourse::{window_over, ContextWindow, DEFAULT_SPAN};
use mind2_core::linearize::{find_marker, omega_over, parse_target, AblationMask, LinearizeError};
use mind2_core::runner::generation_prompt;

pub const MAX_MESSAGE_CHARS: usize = 2000;
pub const MAX_SITUATION_CHARS: usize = 2000;
pub const MAX_WINDOW_SPAN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSettings {
    pub window_span: usize,
    pub mask: AblationMask,
    pub generation: GenerationConfig,
}

impl Default for SessionSettings {
    fn default() -> Self {
        SessionSettings {
            window_span: DEFAULT_SPAN,
            mask: AblationMask::FULL,
            generation: GenerationConfig::default(),
        }
    }
}

/// Partial settings; absent fields keep their current value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsPatch {
    #[serde(default)]
    pub window_span: Option<usize>,
    #[serde(default)]
    pub mask: Option<AblationMask>,
    #[serde(default)]
    pub generation: Option<GenerationConfig>,
}

impl SettingsPatch {
    /// Settings with the patch applied, or `(field, message)` per violation.
    pub fn apply(&self, base: &SessionSettings) -> Result<SessionSettings, Vec<(String, String)>> {
        let s = SessionSettings {
            window_span: self.window_span.unwrap_or(base.window_span),
            mask: self.mask.unwrap_or(base.mask),
            generation: self.generation.unwrap_or(base.generation),
        };
        let mut errors = Vec::new();
        if !(1..=MAX_WINDOW_SPAN).contains(&s.window_span) {
            errors.push((
                "window_span".to_string(),
                format!("must be in 1..={MAX_WINDOW_SPAN}, got {}", s.window_span),
            ));
        }
        for (field, msg) in s.generation.violations() {
            errors.push((format!("generation.{field}"), msg));
        }
        if errors.is_empty() {
            Ok(s)
        } else {
            Err(errors)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowMember {
    pub utterance_index: usize,
    pub speaker: Speaker,
    /// Character range of the utterance text inside `text`.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowView {
    pub span: usize,
    pub text: String,
    pub members: Vec<WindowMember>,
}

impl From<&ContextWindow> for WindowView {
    fn from(w: &ContextWindow) -> Self {
        let ranges = w.member_ranges();
        WindowView {
            span: w.span,
            text: w.rendered_text.clone(),
            members: w
                .members
                .iter()
                .zip(ranges)
                .map(|(u, (idx, r))| WindowMember {
                    utterance_index: idx,
                    speaker: u.speaker,
                    start: r.start,
                    end: r.end,
                })
                .collect(),
        }
    }
}

/// A triplet as shown to clients: terms, their source window and the
/// character offsets of every term inside the window text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletView {
    pub utterance_index: usize,
    pub perspective: Perspective,
    pub btm_terms: Vec<String>,
    pub peu_terms: Vec<String>,
    pub bcr_terms: Vec<String>,
    pub window: WindowView,
    pub provenance: Vec<TermProvenance>,
}

impl From<&BckTriplet> for TripletView {
    fn from(t: &BckTriplet) -> Self {
        TripletView {
            utterance_index: t.utterance_index,
            perspective: t.perspective,
            btm_terms: t.btm_terms.clone(),
            peu_terms: t.peu_terms.clone(),
            bcr_terms: t.bcr_terms.clone(),
            window: WindowView::from(&t.source_window),
            provenance: t.provenance(),
        }
    }
}

/// Outcome of one user message. Carries no ids or timestamps, so equal
/// inputs give byte-identical JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnResult {
    pub user_utterance: Utterance,
    pub system_utterance: Utterance,
    pub strategy: Strategy,
    pub well_formed: bool,
    /// Ω exactly as sent to the generation backend (after the instruction).
    pub omega: String,
    pub generated_text: String,
    /// History utterances dropped from Ω to fit the input budget.
    pub truncated_pairs: usize,
    pub settings: SessionSettings,
    /// Triplet of the user message; the newest knowledge in Ω.
    pub user_bck: TripletView,
    /// Triplet of the generated reply, used by later turns.
    pub system_bck: TripletView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionInfo {
    pub id: String,
    pub situation: String,
    pub created_at_ms: u64,
    pub settings: SessionSettings,
    pub turns: usize,
    pub transcript: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trace {
    pub id: String,
    pub situation: String,
    pub settings: SessionSettings,
    pub transcript: Vec<Utterance>,
    pub turns: Vec<TurnResult>,
    /// One entry per utterance whose window is non-empty, in order.
    pub bck: Vec<TripletView>,
}

/// Log record; a session is the fold of its events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        id: String,
        situation: String,
        created_at_ms: u64,
        settings: SessionSettings,
    },
    Settings {
        settings: SessionSettings,
    },
    Turn {
        result: Box<TurnResult>,
        user_triplet: Box<BckTriplet>,
        system_triplet: Box<BckTriplet>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: String,
    pub situation: String,
    pub created_at_ms: u64,
    pub settings: SessionSettings,
    pub transcript: Vec<Utterance>,
    /// One per transcript utterance, empty-window triplets included.
    pub triplets: Vec<BckTriplet>,
    pub turns: Vec<TurnResult>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("event log does not start with a creation event")]
    MissingCreate,
    #[error("duplicate creation event")]
    DuplicateCreate,
    #[error("turn event out of sequence at utterance {0}")]
    OutOfSequence(usize),
}

impl Session {
    pub fn new(id: String, situation: String, created_at_ms: u64, settings: SessionSettings) -> Self {
        Session {
            id,
            situation,
            created_at_ms,
            settings,
            transcript: Vec::new(),
            triplets: Vec::new(),
            turns: Vec::new(),
        }
    }

    pub fn replay(events: &[Event]) -> Result<Self, ReplayError> {
        let mut it = events.iter();
        let mut s = match it.next() {
            Some(Event::Created {
                id,
                situation,
                created_at_ms,
                settings,
            }) => Session::new(id.clone(), situation.clone(), *created_at_ms, *settings),
            _ => return Err(ReplayError::MissingCreate),
        };
        for e in it {
            s.apply(e)?;
        }
        Ok(s)
    }

    pub fn apply(&mut self, event: &Event) -> Result<(), ReplayError> {
        match event {
            Event::Created { .. } => return Err(ReplayError::DuplicateCreate),
            Event::Settings { settings } => self.settings = *settings,
            Event::Turn {
                result,
                user_triplet,
                system_triplet,
            } => {
                let next = self.transcript.len() + 1;
                if result.user_utterance.index != next || result.system_utterance.index != next + 1 {
                    return Err(ReplayError::OutOfSequence(next));
                }
                self.transcript.push(result.user_utterance.clone());
                self.transcript.push(result.system_utterance.clone());
                self.triplets.push((**user_triplet).clone());
                self.triplets.push((**system_triplet).clone());
                self.turns.push((**result).clone());
            }
        }
        Ok(())
    }

    pub fn info(&self) -> SessionInfo {
        SessionInfo {
            id: self.id.clone(),
            situation: self.situation.clone(),
            created_at_ms: self.created_at_ms,
            settings: self.settings,
            turns: self.turns.len(),
            transcript: self.transcript.clone(),
        }
    }

    pub fn trace(&self) -> Trace {
        Trace {
            id: self.id.clone(),
            situation: self.situation.clone(),
            settings: self.settings,
            transcript: self.transcript.clone(),
            turns: self.turns.clone(),
            bck: self
                .triplets
                .iter()
                .filter(|t| !t.source_window.is_empty())
                .map(TripletView::from)
                .collect(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TurnError {
    #[error("message text is empty")]
    EmptyText,
    #[error("message is {len} characters, above the {max} limit")]
    TooLong { len: usize, max: usize },
    #[error("message contains the reserved marker {0}")]
    Marker(&'static str),
    #[error("cannot fit the turn into the input budget: {0}")]
    Linearize(#[source] LinearizeError),
    #[error("extraction failed: {0}")]
    Extraction(#[source] BckError),
    #[error("generation failed: {0}")]
    Generation(String),
}

pub fn check_text(text: &str, max: usize) -> Result<(), TurnError> {
    if text.trim().is_empty() {
        return Err(TurnError::EmptyText);
    }
    let len = text.chars().count();
    if len > max {
        return Err(TurnError::TooLong { len, max });
    }
    match find_marker(text) {
        Some(m) => Err(TurnError::Marker(m)),
        None => Ok(()),
    }
}

pub struct Backends<'a> {
    pub extraction: &'a dyn Backend,
    pub generation: &'a dyn Backend,
    pub extraction_config: GenerationConfig,
    pub retry: RetryPolicy,
}

fn extract(
    session: &Session,
    utterances: &[Utterance],
    index: usize,
    perspective: Perspective,
    b: &Backends<'_>,
) -> Result<BckTriplet, TurnError> {
    let w = window_over(&session.id, utterances, index, session.settings.window_span)
        .expect("index and span validated");
    extract_triplet_detailed(&w, perspective, b.extraction, &b.extraction_config, &b.retry)
        .map(|(t, _)| t)
        .map_err(TurnError::Extraction)
}

/// Runs one turn against a snapshot and returns the event to commit. The
/// session itself is untouched, so a failure leaves nothing to undo.
pub fn run_turn(session: &Session, text: &str, b: &Backends<'_>) -> Result<Event, TurnError> {
    check_text(text, MAX_MESSAGE_CHARS)?;
    let settings = session.settings;
    let user_index = session.transcript.len() + 1;
    let user = Utterance::new(user_index, Speaker::User, text.trim());
    let mut utterances = session.transcript.clone();
    utterances.push(user.clone());

    let user_triplet = extract(session, &utterances, user_index, Perspective::UserSide, b)?;
    let triplets: Vec<Option<&BckTriplet>> = session
        .triplets
        .iter()
        .chain(std::iter::once(&user_triplet))
        .map(Some)
        .collect();
    let omega = omega_over(
        &session.id,
        &session.situation,
        &utterances,
        &triplets,
        &settings.mask,
        Some(settings.generation.max_input_tokens),
    )
    .map_err(TurnError::Linearize)?;

    let system_index = user_index + 1;
    let request = CompletionRequest::new(generation_prompt(&omega.text), settings.generation)
        .with_key(format!("turn#{system_index}"));
    let response =
        complete_with_retry(b.generation, &request, &b.retry).map_err(|e| TurnError::Generation(e.to_string()))?;
    let parsed = parse_target(&response.text);
    let reply = parsed.response.trim();
    if reply.is_empty() {
        return Err(TurnError::Generation(format!(
            "no response text in backend output {:?}",
            response.text
        )));
    }
    let system = Utterance::new(system_index, Speaker::System, reply).with_strategy(parsed.strategy);
    utterances.push(system.clone());
    let system_triplet = extract(session, &utterances, system_index, Perspective::SystemSide, b)?;

    let result = TurnResult {
        user_utterance: user,
        system_utterance: system,
        strategy: parsed.strategy,
        well_formed: parsed.well_formed,
        omega: omega.text,
        generated_text: response.text,
        truncated_pairs: omega.dropped,
        settings,
        user_bck: TripletView::from(&user_triplet),
        system_bck: TripletView::from(&system_triplet),
    };
    Ok(Event::Turn {
        result: Box::new(result),
        user_triplet: Box::new(user_triplet),
        system_triplet: Box::new(system_triplet),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mind2_core::backend::MockBackend;

    fn backends(m: &MockBackend) -> Backends<'_> {
        Backends {
            extraction: m,
            generation: m,
            extraction_config: GenerationConfig::extraction(),
            retry: RetryPolicy::immediate(1),
        }
    }

    fn fresh() -> Session {
        Session::new("s1".into(), "I lost my job".into(), 0, SessionSettings::default())
    }

    #[test]
    fn first_turn_has_empty_user_triplet() {
        let m = MockBackend::standard();
        let s = fresh();
        let Event::Turn { result, .. } = run_turn(&s, "I feel anxious about money", &backends(&m)).unwrap() else {
            panic!("expected a turn event");
        };
        assert!(result.user_bck.window.members.is_empty());
        assert!(result.user_bck.provenance.is_empty());
        assert!(result.omega.starts_with("[CLS] [syp] I lost my job [usr] I feel anxious about money"));
        assert_eq!(result.system_utterance.index, 2);
        assert_eq!(result.system_bck.window.members.len(), 1);
    }

    #[test]
    fn replay_rebuilds_state() {
        let m = MockBackend::standard();
        let mut s = fresh();
        let mut events = vec![Event::Created {
            id: s.id.clone(),
            situation: s.situation.clone(),
            created_at_ms: 0,
            settings: s.settings,
        }];
        for text in ["I lost my job", "I cannot sleep at night"] {
            let e = run_turn(&s, text, &backends(&m)).unwrap();
            s.apply(&e).unwrap();
            events.push(e);
        }
        assert_eq!(Session::replay(&events).unwrap(), s);
        assert_eq!(s.trace().bck.len(), 3);
        assert_eq!(Session::replay(&events[1..]), Err(ReplayError::MissingCreate));
    }

    #[test]
    fn text_checks() {
        assert!(matches!(check_text("  ", 10), Err(TurnError::EmptyText)));
        assert!(matches!(check_text("abcdefghijk", 10), Err(TurnError::TooLong { len: 11, max: 10 })));
        assert!(matches!(check_text("hi [cog]", 10), Err(TurnError::Marker("[cog]"))));
        assert!(check_text("héllo", 5).is_ok());
    }

    #[test]
    fn patch_validation_reports_fields() {
        let p = SettingsPatch {
            window_span: Some(0),
            generation: Some(GenerationConfig {
                top_p: 0.0,
                ..GenerationConfig::default()
            }),
            ..SettingsPatch::default()
        };
        let errs = p.apply(&SessionSettings::default()).unwrap_err();
        let fields: Vec<_> = errs.iter().map(|e| e.0.as_str()).collect();
        assert_eq!(fields, vec!["window_span", "generation.top_p"]);
    }
}
