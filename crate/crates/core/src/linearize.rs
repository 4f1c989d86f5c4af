//! Marker-tagged sequences: the model input Ω (situation, tagged history,
//! then one BCK block per history utterance) and the target Y
//! (`[str] <strategy> [rsp] <response>`).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bck::{BckStore, BckTriplet, CognitiveComponent};
use crate::corpus::{Conversation, Speaker, Strategy, Utterance};

pub mod markers {
    pub const CLS: &str = "[CLS]";
    pub const SYP: &str = "[syp]";
    pub const SYS: &str = "[sys]";
    pub const USR: &str = "[usr]";
    pub const COG: &str = "[cog]";
    pub const MIND: &str = "[mind]";
    pub const UTIL: &str = "[util]";
    pub const PRNT: &str = "[prnt]";
    pub const STR: &str = "[str]";
    pub const RSP: &str = "[rsp]";

    pub const ALL: [&str; 10] = [CLS, SYP, SYS, USR, COG, MIND, UTIL, PRNT, STR, RSP];
}

/// First marker string occurring in `text`.
pub fn find_marker(text: &str) -> Option<&'static str> {
    markers::ALL.into_iter().find(|m| text.contains(m))
}

pub fn speaker_marker(speaker: Speaker) -> &'static str {
    match speaker {
        Speaker::System => markers::SYS,
        Speaker::User => markers::USR,
    }
}

pub fn component_marker(component: CognitiveComponent) -> &'static str {
    match component {
        CognitiveComponent::Btm => markers::MIND,
        CognitiveComponent::Peu => markers::UTIL,
        CognitiveComponent::Bcr => markers::PRNT,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinearizeError {
    #[error("{location} contains the reserved marker {marker}")]
    MarkerCollision { location: String, marker: &'static str },
    #[error("{conversation_id}#{psi} is not a System turn")]
    NotSystemTurn { conversation_id: String, psi: usize },
    #[error("{conversation_id}: turn {psi} out of range 1..={len}")]
    TurnOutOfRange { conversation_id: String, psi: usize, len: usize },
    #[error("budget of {budget} tokens is below the minimal sequence of {minimum} tokens")]
    Budget { budget: usize, minimum: usize },
    #[error("response is empty")]
    EmptyResponse,
    #[error("missing BCK for {}", .0.join(", "))]
    MissingBck(Vec<String>),
    #[error("unknown mask component {0:?}")]
    UnknownMaskComponent(String),
    #[error("writing {path}: {message}")]
    Io { path: String, message: String },
}

/// Which BCK components enter Ω. Applies to a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationMask {
    pub include_btm: bool,
    pub include_peu: bool,
    pub include_bcr: bool,
}

impl Default for AblationMask {
    fn default() -> Self {
        AblationMask::FULL
    }
}

impl AblationMask {
    pub const FULL: AblationMask = AblationMask {
        include_btm: true,
        include_peu: true,
        include_bcr: true,
    };
    pub const NONE: AblationMask = AblationMask {
        include_btm: false,
        include_peu: false,
        include_bcr: false,
    };

    pub const fn new(include_btm: bool, include_peu: bool, include_bcr: bool) -> Self {
        AblationMask {
            include_btm,
            include_peu,
            include_bcr,
        }
    }

    pub fn includes(&self, component: CognitiveComponent) -> bool {
        match component {
            CognitiveComponent::Btm => self.include_btm,
            CognitiveComponent::Peu => self.include_peu,
            CognitiveComponent::Bcr => self.include_bcr,
        }
    }

    pub fn included(&self) -> Vec<CognitiveComponent> {
        CognitiveComponent::ALL.into_iter().filter(|c| self.includes(*c)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.included().is_empty()
    }

    /// The seven ablation rows: each single component, each pair, then the
    /// full mask last.
    pub fn ablation_grid() -> Vec<AblationMask> {
        vec![
            AblationMask::new(false, false, true),
            AblationMask::new(false, true, false),
            AblationMask::new(true, false, false),
            AblationMask::new(false, true, true),
            AblationMask::new(true, false, true),
            AblationMask::new(true, true, false),
            AblationMask::FULL,
        ]
    }

    /// Row label: `full`, `none`, or `w/o <components>`.
    pub fn label(&self) -> String {
        let excluded: Vec<&str> = CognitiveComponent::ALL
            .into_iter()
            .filter(|c| !self.includes(*c))
            .map(|c| match c {
                CognitiveComponent::Btm => "BTM",
                CognitiveComponent::Peu => "PEU",
                CognitiveComponent::Bcr => "BCR",
            })
            .collect();
        match excluded.len() {
            0 => "full".to_string(),
            3 => "none".to_string(),
            _ => format!("w/o {}", excluded.join(", ")),
        }
    }
}

impl fmt::Display for AblationMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inc: Vec<&str> = self.included().into_iter().map(|c| c.as_str()).collect();
        if inc.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&inc.join(","))
        }
    }
}

/// Parses `btm,peu,bcr` style lists; `all`/`full` and `none` are accepted.
impl FromStr for AblationMask {
    type Err = LinearizeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        if t == "all" || t == "full" {
            return Ok(AblationMask::FULL);
        }
        if t == "none" || t.is_empty() {
            return Ok(AblationMask::NONE);
        }
        let mut mask = AblationMask::NONE;
        for part in t.split(',') {
            match part.trim().parse::<CognitiveComponent>() {
                Ok(CognitiveComponent::Btm) => mask.include_btm = true,
                Ok(CognitiveComponent::Peu) => mask.include_peu = true,
                Ok(CognitiveComponent::Bcr) => mask.include_bcr = true,
                Err(_) => return Err(LinearizeError::UnknownMaskComponent(part.trim().to_string())),
            }
        }
        Ok(mask)
    }
}

fn check_text(location: impl FnOnce() -> String, text: &str) -> Result<(), LinearizeError> {
    match find_marker(text) {
        Some(marker) => Err(LinearizeError::MarkerCollision {
            location: location(),
            marker,
        }),
        None => Ok(()),
    }
}

fn check_turn(conv: &Conversation, psi: usize) -> Result<(), LinearizeError> {
    if psi == 0 || psi > conv.len() {
        return Err(LinearizeError::TurnOutOfRange {
            conversation_id: conv.id.clone(),
            psi,
            len: conv.len(),
        });
    }
    if conv.utterances[psi - 1].speaker != Speaker::System {
        return Err(LinearizeError::NotSystemTurn {
            conversation_id: conv.id.clone(),
            psi,
        });
    }
    Ok(())
}

/// `[syp] s` followed by each history utterance behind its speaker marker.
pub fn alpha_over(conversation_id: &str, situation: &str, history: &[Utterance]) -> Result<String, LinearizeError> {
    check_text(|| format!("{conversation_id}: situation"), situation)?;
    let mut out = format!("{} {}", markers::SYP, situation.trim());
    for u in history {
        out.push(' ');
        out.push_str(&tagged(conversation_id, u)?);
    }
    Ok(out)
}

fn tagged(conversation_id: &str, u: &Utterance) -> Result<String, LinearizeError> {
    check_text(|| format!("{conversation_id}#{}", u.index), &u.text)?;
    Ok(format!("{} {}", speaker_marker(u.speaker), u.text.trim()))
}

/// α for predicting System turn `psi`: situation plus u_1..u_{ψ−1}.
pub fn build_alpha(conv: &Conversation, psi: usize) -> Result<String, LinearizeError> {
    check_turn(conv, psi)?;
    alpha_over(&conv.id, &conv.situation, &conv.utterances[..psi - 1])
}

/// `[mind] .. [util] .. [prnt] ..` for the components in `mask`; empty
/// components render `none`, excluded ones vanish.
pub fn build_phi(triplet: &BckTriplet, mask: &AblationMask) -> Result<String, LinearizeError> {
    let mut parts = Vec::new();
    for c in mask.included() {
        let terms = triplet.terms(c);
        for t in terms {
            check_text(
                || format!("{}#{} {} term", triplet.conversation_id, triplet.utterance_index, c),
                t,
            )?;
        }
        let body = if terms.is_empty() {
            crate::bck::NONE_SENTINEL.to_string()
        } else {
            terms.iter().map(|t| t.trim()).collect::<Vec<_>>().join(", ")
        };
        parts.push(format!("{} {}", component_marker(c), body));
    }
    Ok(parts.join(" "))
}

fn token_count(s: &str) -> usize {
    s.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Omega {
    pub text: String,
    /// History utterances removed to fit the budget, oldest first.
    pub dropped: usize,
}

/// Ω over an explicit history with one triplet (or none, when the mask is
/// empty) per history utterance.
pub fn omega_over(
    conversation_id: &str,
    situation: &str,
    history: &[Utterance],
    triplets: &[Option<&BckTriplet>],
    mask: &AblationMask,
    budget: Option<usize>,
) -> Result<Omega, LinearizeError> {
    let head = format!("{} {}", markers::CLS, alpha_over(conversation_id, situation, &[])?);
    let mut pairs: Vec<(String, String)> = Vec::with_capacity(history.len());
    let mut missing = Vec::new();
    for (i, u) in history.iter().enumerate() {
        let utt = tagged(conversation_id, u)?;
        let phi = if mask.is_empty() {
            String::new()
        } else {
            match triplets.get(i).copied().flatten() {
                Some(t) => build_phi(t, mask)?,
                None => {
                    missing.push(format!("{conversation_id}#{}", u.index));
                    String::new()
                }
            }
        };
        pairs.push((utt, phi));
    }
    if !missing.is_empty() {
        return Err(LinearizeError::MissingBck(missing));
    }

    let fixed = token_count(&head) + 1;
    let pair_tokens: Vec<usize> = pairs.iter().map(|(u, p)| token_count(u) + token_count(p)).collect();
    let mut start = 0;
    if let Some(budget) = budget {
        let mut total = fixed + pair_tokens.iter().sum::<usize>();
        let minimum = fixed + pair_tokens.last().copied().unwrap_or(0);
        if minimum > budget {
            return Err(LinearizeError::Budget { budget, minimum });
        }
        while total > budget {
            total -= pair_tokens[start];
            start += 1;
        }
    }

    let mut text = head;
    for (u, _) in &pairs[start..] {
        text.push(' ');
        text.push_str(u);
    }
    text.push(' ');
    text.push_str(markers::COG);
    for (_, phi) in &pairs[start..] {
        if !phi.is_empty() {
            text.push(' ');
            text.push_str(phi);
        }
    }
    Ok(Omega { text, dropped: start })
}

/// Ω for predicting System turn `psi` of `conv`.
pub fn build_omega(
    conv: &Conversation,
    psi: usize,
    store: &BckStore,
    mask: &AblationMask,
    budget: Option<usize>,
) -> Result<Omega, LinearizeError> {
    check_turn(conv, psi)?;
    let history = &conv.utterances[..psi - 1];
    let triplets: Vec<Option<&BckTriplet>> = history.iter().map(|u| store.get(&conv.id, u.index)).collect();
    omega_over(&conv.id, &conv.situation, history, &triplets, mask, budget)
}

/// Marker counts of an Ω string.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OmegaShape {
    pub cls: usize,
    pub syp: usize,
    pub cog: usize,
    pub speaker_markers: usize,
    pub mind: usize,
    pub util: usize,
    pub prnt: usize,
}

impl OmegaShape {
    pub fn of(omega: &str) -> Self {
        let n = |m: &str| omega.matches(m).count();
        OmegaShape {
            cls: n(markers::CLS),
            syp: n(markers::SYP),
            cog: n(markers::COG),
            speaker_markers: n(markers::SYS) + n(markers::USR),
            mind: n(markers::MIND),
            util: n(markers::UTIL),
            prnt: n(markers::PRNT),
        }
    }

    pub fn count(&self, component: CognitiveComponent) -> usize {
        match component {
            CognitiveComponent::Btm => self.mind,
            CognitiveComponent::Peu => self.util,
            CognitiveComponent::Bcr => self.prnt,
        }
    }

    pub fn phi_blocks(&self) -> usize {
        self.mind.max(self.util).max(self.prnt)
    }
}

/// Checks the Ω grammar: one leading `[CLS]`, one `[syp]`, one `[cog]`
/// with every speaker marker before it and every BCK marker after it, and
/// one block per history utterance for each component in `mask`.
pub fn check_omega(omega: &str, mask: &AblationMask) -> Result<OmegaShape, String> {
    let shape = OmegaShape::of(omega);
    if !omega.starts_with(markers::CLS) || shape.cls != 1 {
        return Err(format!("expected one leading {}", markers::CLS));
    }
    if shape.syp != 1 || shape.cog != 1 {
        return Err(format!("expected one {} and one {}", markers::SYP, markers::COG));
    }
    let cog = omega.find(markers::COG).expect("counted above");
    let (alpha, phi) = omega.split_at(cog);
    if !alpha[markers::CLS.len()..].trim_start().starts_with(markers::SYP) {
        return Err(format!("{} must follow {}", markers::SYP, markers::CLS));
    }
    if [markers::SYS, markers::USR].iter().any(|m| phi.contains(m)) {
        return Err("speaker marker after [cog]".into());
    }
    if [markers::MIND, markers::UTIL, markers::PRNT].iter().any(|m| alpha.contains(m)) {
        return Err("BCK marker before [cog]".into());
    }
    for c in CognitiveComponent::ALL {
        let want = if mask.includes(c) { shape.speaker_markers } else { 0 };
        if shape.count(c) != want {
            return Err(format!(
                "{} appears {} times, expected {want}",
                component_marker(c),
                shape.count(c)
            ));
        }
    }
    Ok(shape)
}

/// `[str] <label> [rsp] <response>`; the response is trimmed.
pub fn build_target(strategy: Strategy, response: &str) -> Result<String, LinearizeError> {
    let response = response.trim();
    if response.is_empty() {
        return Err(LinearizeError::EmptyResponse);
    }
    check_text(|| "response".to_string(), response)?;
    Ok(format!("{} {} {} {}", markers::STR, strategy.label(), markers::RSP, response))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedTarget {
    pub strategy: Strategy,
    pub response: String,
    pub well_formed: bool,
}

fn label_prefix(text: &str) -> Option<(Strategy, &str)> {
    let t = text.trim_start();
    let lower = t.to_lowercase();
    Strategy::ALL
        .into_iter()
        .filter(|s| lower.starts_with(&s.label().to_lowercase()))
        .max_by_key(|s| s.label().len())
        .map(|s| (s, &t[s.label().len()..]))
}

fn cut_at_marker(text: &str) -> (&str, bool) {
    match markers::ALL.iter().filter_map(|m| text.find(m)).min() {
        Some(i) => (&text[..i], true),
        None => (text, false),
    }
}

/// Inverse of [`build_target`] on well-formed input; lenient otherwise.
/// A missing or unknown strategy becomes `Others`; text between a valid
/// label and `[rsp]` is dropped. Never fails.
pub fn parse_target(text: &str) -> ParsedTarget {
    let t = text.trim();
    let mut well_formed = true;
    let (strategy, rest) = match t.find(markers::STR) {
        Some(i) => {
            well_formed &= i == 0;
            let after = &t[i + markers::STR.len()..];
            match after.find(markers::RSP) {
                Some(j) => {
                    let label = after[..j].trim();
                    let strategy = match label.parse::<Strategy>() {
                        Ok(s) => s,
                        Err(_) => {
                            well_formed = false;
                            label_prefix(label).map(|(s, _)| s).unwrap_or(Strategy::Others)
                        }
                    };
                    (strategy, &after[j + markers::RSP.len()..])
                }
                None => {
                    well_formed = false;
                    match label_prefix(after) {
                        Some((s, rest)) => (s, rest),
                        None => (Strategy::Others, after),
                    }
                }
            }
        }
        None => {
            well_formed = false;
            match t.find(markers::RSP) {
                Some(j) => (Strategy::Others, &t[j + markers::RSP.len()..]),
                None => (Strategy::Others, t),
            }
        }
    };
    let (response, cut) = cut_at_marker(rest);
    let response = response.trim().to_string();
    well_formed &= !cut && !response.is_empty();
    ParsedTarget {
        strategy,
        response,
        well_formed,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearizedExample {
    pub omega: String,
    pub target: String,
    pub conversation_id: String,
    pub turn: usize,
}

/// Reference target for System turn `psi`; unannotated turns use `Others`.
pub fn reference_target(conv: &Conversation, psi: usize) -> Result<String, LinearizeError> {
    check_turn(conv, psi)?;
    let u = &conv.utterances[psi - 1];
    build_target(u.strategy.unwrap_or(Strategy::Others), &u.text).map_err(|e| match e {
        LinearizeError::MarkerCollision { marker, .. } => LinearizeError::MarkerCollision {
            location: format!("{}#{psi}", conv.id),
            marker,
        },
        other => other,
    })
}

pub fn linearize_turn(
    conv: &Conversation,
    psi: usize,
    store: &BckStore,
    mask: &AblationMask,
    budget: Option<usize>,
) -> Result<LinearizedExample, LinearizeError> {
    Ok(LinearizedExample {
        omega: build_omega(conv, psi, store, mask, budget)?.text,
        target: reference_target(conv, psi)?,
        conversation_id: conv.id.clone(),
        turn: psi,
    })
}

/// One example per System turn, in conversation then turn order. Missing
/// BCK is reported for all turns at once.
pub fn training_examples(
    conversations: &[Conversation],
    store: &BckStore,
    mask: &AblationMask,
    budget: Option<usize>,
) -> Result<Vec<LinearizedExample>, LinearizeError> {
    if !mask.is_empty() {
        let mut missing: Vec<String> = Vec::new();
        for conv in conversations {
            let last_system = conv.system_turns().map(|u| u.index).max().unwrap_or(0);
            for u in conv.utterances.iter().take(last_system.saturating_sub(1)) {
                if store.get(&conv.id, u.index).is_none() {
                    missing.push(format!("{}#{}", conv.id, u.index));
                }
            }
        }
        if !missing.is_empty() {
            return Err(LinearizeError::MissingBck(missing));
        }
    }
    let mut out = Vec::new();
    for conv in conversations {
        for u in conv.system_turns() {
            out.push(linearize_turn(conv, u.index, store, mask, budget)?);
        }
    }
    Ok(out)
}

pub fn write_training_jsonl<W: Write>(examples: &[LinearizedExample], mut out: W) -> std::io::Result<()> {
    for e in examples {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn export_training_jsonl(
    conversations: &[Conversation],
    store: &BckStore,
    mask: &AblationMask,
    budget: Option<usize>,
    path: &Path,
) -> Result<usize, LinearizeError> {
    let examples = training_examples(conversations, store, mask, budget)?;
    let mut buf = Vec::new();
    write_training_jsonl(&examples, &mut buf).expect("writing to memory");
    fs::write(path, buf).map_err(|e| LinearizeError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(examples.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bck::Perspective;
    use crate::corpus::Metadata;
    use crate::discourse::window;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, TestCaseError};
    use proptest::strategy::Strategy as _;

    fn exam() -> Conversation {
        Conversation {
            id: "x".into(),
            situation: "exam stress".into(),
            emotion_type: "anxiety".into(),
            problem_type: "academic pressure".into(),
            partition: None,
            utterances: vec![
                Utterance::new(1, Speaker::User, "I failed."),
                Utterance::new(2, Speaker::System, "That must hurt.").with_strategy(Strategy::ReflectionOfFeelings),
            ],
            metadata: Metadata::new(),
        }
    }

    fn long_conv(t: usize) -> Conversation {
        Conversation {
            id: "l".into(),
            situation: "moving abroad alone".into(),
            emotion_type: "sadness".into(),
            problem_type: "loneliness".into(),
            partition: None,
            utterances: (1..=t)
                .map(|i| {
                    let sp = if i % 2 == 1 { Speaker::User } else { Speaker::System };
                    let u = Utterance::new(i, sp, format!("turn {i} says something about feeling alone here"));
                    if sp == Speaker::System {
                        u.with_strategy(Strategy::Question)
                    } else {
                        u
                    }
                })
                .collect(),
            metadata: Metadata::new(),
        }
    }

    fn store_for(conv: &Conversation) -> BckStore {
        conv.utterances
            .iter()
            .map(|u| {
                let w = window(conv, u.index, 5).unwrap();
                let mut t = BckTriplet::empty(w.clone(), Perspective::from(u.speaker));
                if !w.is_empty() {
                    t.btm_terms = vec!["feeling alone".into()];
                    t.bcr_terms = vec!["something".into(), "here".into()];
                }
                t
            })
            .collect()
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(build_alpha(&exam(), 2).unwrap(), "[syp] exam stress [usr] I failed.");
        let mut c = exam();
        c.utterances[0].speaker = Speaker::System;
        assert_eq!(build_alpha(&c, 1).unwrap(), "[syp] exam stress");
        let l = long_conv(4);
        assert_eq!(OmegaShape::of(&build_alpha(&l, 4).unwrap()).speaker_markers, 3);
        assert!(build_alpha(&l, 4).unwrap().contains("[usr] turn 1 says"));
        assert!(build_alpha(&l, 4).unwrap().contains("[sys] turn 2 says"));
    }

    #[test]
    fn alpha_requires_system_turn_and_marker_free_text() {
        assert!(matches!(build_alpha(&exam(), 1), Err(LinearizeError::NotSystemTurn { .. })));
        let mut c = exam();
        c.utterances[0].text = "I [cog] failed".into();
        let err = build_alpha(&c, 2).unwrap_err();
        assert_eq!(
            err,
            LinearizeError::MarkerCollision {
                location: "x#1".into(),
                marker: "[cog]"
            }
        );
    }

    fn job_triplet() -> BckTriplet {
        let c = long_conv(2);
        let mut t = BckTriplet::empty(window(&c, 2, 5).unwrap(), Perspective::SystemSide);
        t.btm_terms = vec!["lost my job".into()];
        t.peu_terms = vec!["gain assistance".into()];
        t
    }

    #[test]
    fn phi_examples() {
        let t = job_triplet();
        assert_eq!(
            build_phi(&t, &AblationMask::FULL).unwrap(),
            "[mind] lost my job [util] gain assistance [prnt] none"
        );
        assert_eq!(build_phi(&t, &AblationMask::new(true, false, false)).unwrap(), "[mind] lost my job");
        assert_eq!(build_phi(&t, &AblationMask::NONE).unwrap(), "");
    }

    #[test]
    fn omega_two_turn_fixture() {
        let c = exam();
        let mut store = BckStore::new();
        let mut t1 = BckTriplet::empty(window(&c, 1, 5).unwrap(), Perspective::UserSide);
        t1.btm_terms = vec!["failed".into()];
        store.insert(t1);
        let o = build_omega(&c, 2, &store, &AblationMask::FULL, Some(256)).unwrap();
        assert_eq!(o.text, "[CLS] [syp] exam stress [usr] I failed. [cog] [mind] failed [util] none [prnt] none");
        let bare = build_omega(&c, 2, &BckStore::new(), &AblationMask::NONE, None).unwrap();
        assert_eq!(bare.text, "[CLS] [syp] exam stress [usr] I failed. [cog]");
    }

    #[test]
    fn omega_missing_bck_is_an_error() {
        let c = long_conv(4);
        let err = build_omega(&c, 4, &BckStore::new(), &AblationMask::FULL, None).unwrap_err();
        assert_eq!(err, LinearizeError::MissingBck(vec!["l#1".into(), "l#2".into(), "l#3".into()]));
    }

    #[test]
    fn truncation_drops_pairs_from_the_front() {
        let c = long_conv(6);
        let store = store_for(&c);
        let full = build_omega(&c, 6, &store, &AblationMask::FULL, None).unwrap();
        let n = token_count(&full.text);
        let o = build_omega(&c, 6, &store, &AblationMask::FULL, Some(n - 1)).unwrap();
        assert_eq!(o.dropped, 1);
        assert!(!o.text.contains("turn 1 says"));
        assert!(token_count(&o.text) < n);
        let shape = check_omega(&o.text, &AblationMask::FULL).unwrap();
        assert_eq!(shape.speaker_markers, 4);
        assert_eq!(shape.phi_blocks(), 4);
        assert!(o.text.contains("[syp] moving abroad alone"));
        assert!(o.text.contains("turn 5 says"));
    }

    #[test]
    fn budget_below_minimum_is_an_error() {
        let c = long_conv(6);
        assert!(matches!(
            build_omega(&c, 6, &store_for(&c), &AblationMask::FULL, Some(5)),
            Err(LinearizeError::Budget { budget: 5, .. })
        ));
    }

    #[test]
    fn target_examples() {
        let y = build_target(Strategy::Question, "How long has this been going on?").unwrap();
        assert_eq!(y, "[str] Question [rsp] How long has this been going on?");
        let p = parse_target(&y);
        assert_eq!((p.strategy, p.response.as_str(), p.well_formed), (Strategy::Question, "How long has this been going on?", true));

        let p = parse_target("no markers at all");
        assert_eq!((p.strategy, p.response.as_str(), p.well_formed), (Strategy::Others, "no markers at all", false));

        let p = parse_target("[str] Self-disclosure [rsp] I felt that way too.");
        assert_eq!(p.strategy, Strategy::SelfDisclosure);
        assert_eq!(p.response, "I felt that way too.");
        assert!(p.well_formed);
    }

    #[test]
    fn lenient_parsing() {
        let p = parse_target("[str] Question because I care [rsp] Why?");
        assert_eq!((p.strategy, p.response.as_str(), p.well_formed), (Strategy::Question, "Why?", false));
        let p = parse_target("[rsp] Just this");
        assert_eq!((p.strategy, p.response.as_str(), p.well_formed), (Strategy::Others, "Just this", false));
        let p = parse_target("[str] Information You can call a hotline.");
        assert_eq!((p.strategy, p.response.as_str()), (Strategy::Information, "You can call a hotline."));
        assert!(!p.well_formed);
        let p = parse_target("[str] Question [rsp] Why? [str] Others [rsp] more");
        assert_eq!((p.response.as_str(), p.well_formed), ("Why?", false));
        let p = parse_target("[str] Venting [rsp] ok");
        assert_eq!((p.strategy, p.well_formed), (Strategy::Others, false));
    }

    #[test]
    fn target_build_errors() {
        assert_eq!(build_target(Strategy::Others, "  "), Err(LinearizeError::EmptyResponse));
        assert!(matches!(
            build_target(Strategy::Others, "see [rsp] here"),
            Err(LinearizeError::MarkerCollision { marker: "[rsp]", .. })
        ));
    }

    #[test]
    fn grid_and_mask_parsing() {
        let g = AblationMask::ablation_grid();
        assert_eq!(g.len(), 7);
        assert_eq!(*g.last().unwrap(), AblationMask::FULL);
        let labels: Vec<String> = g.iter().map(|m| m.label()).collect();
        assert_eq!(labels[0], "w/o BTM, PEU");
        assert_eq!(labels[6], "full");
        assert_eq!("btm,peu,bcr".parse::<AblationMask>().unwrap(), AblationMask::FULL);
        assert_eq!("none".parse::<AblationMask>().unwrap(), AblationMask::NONE);
        assert_eq!(" PEU ".parse::<AblationMask>().unwrap(), AblationMask::new(false, true, false));
        assert!("btm,foo".parse::<AblationMask>().is_err());
        for m in g {
            assert_eq!(m.to_string().parse::<AblationMask>().unwrap(), m);
        }
    }

    #[test]
    fn export_counts_system_turns_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let c = vec![long_conv(4)];
        let store = store_for(&c[0]);
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        assert_eq!(export_training_jsonl(&c, &store, &AblationMask::FULL, Some(256), &a).unwrap(), 2);
        export_training_jsonl(&c, &store, &AblationMask::FULL, Some(256), &b).unwrap();
        let text = fs::read_to_string(&a).unwrap();
        assert_eq!(text, fs::read_to_string(&b).unwrap());
        for line in text.lines() {
            let e: LinearizedExample = serde_json::from_str(line).unwrap();
            check_omega(&e.omega, &AblationMask::FULL).unwrap();
            assert!(parse_target(&e.target).well_formed);
        }
        let err = export_training_jsonl(&c, &BckStore::new(), &AblationMask::FULL, None, &a).unwrap_err();
        assert_eq!(err, LinearizeError::MissingBck(vec!["l#1".into(), "l#2".into(), "l#3".into()]));
    }

    fn response_text() -> impl proptest::strategy::Strategy<Value = String> {
        "[A-Za-z0-9 ,.?!'-]{1,60}".prop_filter("non-blank", |s| !s.trim().is_empty())
    }

    proptest! {
        #[test]
        fn target_round_trip(idx in 0usize..8, resp in response_text()) {
            let s = Strategy::ALL[idx];
            let y = build_target(s, &resp).unwrap();
            let p = parse_target(&y);
            prop_assert!(p.well_formed);
            prop_assert_eq!(p.strategy, s);
            prop_assert_eq!(p.response, resp.trim());
        }

        #[test]
        fn masked_omega_is_a_subsequence(t in 2usize..10, bits in 0u8..8) {
            let c = long_conv(t);
            let psi = if t % 2 == 0 { t } else { t - 1 };
            let store = store_for(&c);
            let mask = AblationMask::new(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
            let full = build_omega(&c, psi, &store, &AblationMask::FULL, None).unwrap().text;
            let masked = build_omega(&c, psi, &store, &mask, None).unwrap().text;
            check_omega(&masked, &mask).map_err(TestCaseError::fail)?;
            let mut it = full.split_whitespace();
            prop_assert!(masked.split_whitespace().all(|tok| it.any(|f| f == tok)));
        }
    }
}
