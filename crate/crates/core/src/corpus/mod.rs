//! Conversation data model, ESConv ingestion and normalized corpus files.
//!
//! The normalized corpus is JSONL with one [`Conversation`] per line. Field
//! names follow the serde derives below; optional fields are omitted when
//! empty so that `write_jsonl(read_jsonl(x)) == x` for normalized input.

mod esconv;
mod split;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

pub use esconv::{load_esconv, parse_esconv};
pub use split::{sample_fraction, sample_split, sample_split_with, standard_partition, CorpusSplit, SplitOptions};

/// Opaque per-record or per-message fields carried through unchanged.
pub type Metadata = BTreeMap<String, Value>;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON: {0}")]
    Json(#[source] serde_json::Error),
    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("record {index}: unknown strategy label {label:?}")]
    UnknownStrategy { index: usize, label: String },
    #[error("record {index}: empty dialog")]
    EmptyDialog { index: usize },
    #[error("record {index}: {message}")]
    Invalid { index: usize, message: String },
    #[error("duplicate conversation id {0:?}")]
    DuplicateId(String),
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// The two dialogue roles: the supporter (system) and the seeker (user).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    System,
    User,
}

impl Speaker {
    /// Maps ESConv speaker strings. `supporter`/`seeker` are canonical;
    /// `system`/`user` are accepted for already-normalized sources.
    pub fn from_source(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "supporter" | "system" | "sys" => Some(Speaker::System),
            "seeker" | "user" | "usr" => Some(Speaker::User),
            _ => None,
        }
    }

    /// Role tag used when rendering windows ("System" / "User").
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::System => "System",
            Speaker::User => "User",
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// The closed set of eight ESConv support strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Question,
    RestatementOrParaphrasing,
    ReflectionOfFeelings,
    SelfDisclosure,
    AffirmationAndReassurance,
    ProvidingSuggestions,
    Information,
    Others,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown strategy label {0:?}")]
pub struct UnknownStrategy(pub String);

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Question,
        Strategy::RestatementOrParaphrasing,
        Strategy::ReflectionOfFeelings,
        Strategy::SelfDisclosure,
        Strategy::AffirmationAndReassurance,
        Strategy::ProvidingSuggestions,
        Strategy::Information,
        Strategy::Others,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Question => "Question",
            Strategy::RestatementOrParaphrasing => "Restatement or Paraphrasing",
            Strategy::ReflectionOfFeelings => "Reflection of Feelings",
            Strategy::SelfDisclosure => "Self-disclosure",
            Strategy::AffirmationAndReassurance => "Affirmation and Reassurance",
            Strategy::ProvidingSuggestions => "Providing Suggestions",
            Strategy::Information => "Information",
            Strategy::Others => "Others",
        }
    }
}

/// Case-insensitive, whitespace-collapsed label key.
fn label_key(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl FromStr for Strategy {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = label_key(s);
        Strategy::ALL
            .into_iter()
            .find(|st| label_key(st.label()) == key)
            .ok_or_else(|| UnknownStrategy(s.to_string()))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    /// 1-based position in the dialogue.
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: Metadata,
}

impl Utterance {
    pub fn new(index: usize, speaker: Speaker, text: impl Into<String>) -> Self {
        Utterance {
            index,
            speaker,
            text: text.into(),
            strategy: None,
            metadata: Metadata::new(),
        }
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = Some(strategy);
        self
    }
}

/// Partition a source record declares for itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    #[serde(alias = "valid", alias = "dev", alias = "val")]
    Validation,
    Test,
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Partition::Train),
            "validation" | "valid" | "dev" | "val" => Ok(Partition::Validation),
            "test" => Ok(Partition::Test),
            other => Err(format!("unknown partition {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub situation: String,
    pub emotion_type: String,
    pub problem_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<Partition>,
    pub utterances: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: Metadata,
}

impl Conversation {
    /// Utterance at 1-based index `psi`.
    pub fn utterance(&self, psi: usize) -> Option<&Utterance> {
        psi.checked_sub(1).and_then(|i| self.utterances.get(i))
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn system_turns(&self) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(|u| u.speaker == Speaker::System)
    }

    /// Checks the structural invariants: at least two utterances,
    /// contiguous 1-based indices, non-empty text, no user strategies.
    pub fn validate(&self) -> Result<(), String> {
        if self.utterances.len() < 2 {
            return Err(format!(
                "conversation {:?} has {} utterance(s), at least 2 required",
                self.id,
                self.utterances.len()
            ));
        }
        for (pos, u) in self.utterances.iter().enumerate() {
            if u.index != pos + 1 {
                return Err(format!(
                    "conversation {:?}: utterance at position {} has index {}",
                    self.id,
                    pos + 1,
                    u.index
                ));
            }
            if u.text.trim().is_empty() {
                return Err(format!("conversation {:?}: utterance {} is empty", self.id, u.index));
            }
            if u.speaker == Speaker::User && u.strategy.is_some() {
                return Err(format!(
                    "conversation {:?}: user utterance {} carries a strategy",
                    self.id, u.index
                ));
            }
        }
        Ok(())
    }
}

fn check_unique_ids(conversations: &[Conversation]) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for c in conversations {
        if !seen.insert(c.id.as_str()) {
            return Err(CorpusError::DuplicateId(c.id.clone()));
        }
    }
    Ok(())
}

/// Writes one conversation per line.
pub fn write_jsonl<W: Write>(conversations: &[Conversation], mut out: W) -> std::io::Result<()> {
    for c in conversations {
        serde_json::to_writer(&mut out, c)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_jsonl(conversations: &[Conversation], path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    write_jsonl(conversations, BufWriter::new(file)).map_err(|e| CorpusError::io(path, e))
}

/// Reads a normalized corpus, validating every conversation.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Conversation>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(Path::new("<jsonl>"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation =
            serde_json::from_str(&line).map_err(|source| CorpusError::Line { line: i + 1, source })?;
        conv.validate()
            .map_err(|message| CorpusError::Invalid { index: i, message })?;
        out.push(conv);
    }
    check_unique_ids(&out)?;
    Ok(out)
}

/// Loads either an ESConv JSON array or a normalized JSONL corpus,
/// chosen by the first non-whitespace byte.
pub fn load_corpus(path: &Path) -> Result<Vec<Conversation>, CorpusError> {
    let mut raw = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut raw))
        .map_err(|e| CorpusError::io(path, e))?;
    if raw.trim_start().starts_with('[') {
        parse_esconv(&raw)
    } else {
        read_jsonl(BufReader::new(raw.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_labels_parse_case_insensitively() {
        assert_eq!("reflection of feelings".parse::<Strategy>().unwrap(), Strategy::ReflectionOfFeelings);
        assert_eq!("  Providing   Suggestions ".parse::<Strategy>().unwrap(), Strategy::ProvidingSuggestions);
        assert_eq!("SELF-DISCLOSURE".parse::<Strategy>().unwrap(), Strategy::SelfDisclosure);
        assert!("Venting".parse::<Strategy>().is_err());
    }

    #[test]
    fn every_label_round_trips() {
        for s in Strategy::ALL {
            assert_eq!(s.label().parse::<Strategy>().unwrap(), s);
        }
        let labels: HashSet<_> = Strategy::ALL.iter().map(|s| s.label()).collect();
        assert_eq!(labels.len(), 8);
    }

    #[test]
    fn validate_rejects_user_strategy_and_gaps() {
        let mut c = Conversation {
            id: "c".into(),
            situation: "s".into(),
            emotion_type: "e".into(),
            problem_type: "p".into(),
            partition: None,
            utterances: vec![
                Utterance::new(1, Speaker::User, "hi"),
                Utterance::new(2, Speaker::System, "hello"),
            ],
            metadata: Metadata::new(),
        };
        assert!(c.validate().is_ok());
        c.utterances[0].strategy = Some(Strategy::Question);
        assert!(c.validate().is_err());
        c.utterances[0].strategy = None;
        c.utterances[1].index = 3;
        assert!(c.validate().is_err());
    }
}
