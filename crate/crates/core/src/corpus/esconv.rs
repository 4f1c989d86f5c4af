use std::fs;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use super::{check_unique_ids, Conversation, CorpusError, Metadata, Partition, Speaker, Strategy, Utterance};

#[derive(Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<Value>,
    #[serde(default)]
    situation: String,
    #[serde(default)]
    emotion_type: String,
    #[serde(default)]
    problem_type: String,
    #[serde(default, alias = "partition")]
    split: Option<String>,
    dialog: Vec<RawMessage>,
    #[serde(flatten)]
    extra: Metadata,
}

#[derive(Deserialize)]
struct RawMessage {
    speaker: String,
    content: String,
    #[serde(default)]
    annotation: Option<Value>,
    #[serde(default)]
    strategy: Option<String>,
    #[serde(flatten)]
    extra: Metadata,
}

/// Loads an ESConv-format JSON array from disk.
pub fn load_esconv(path: &Path) -> Result<Vec<Conversation>, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    parse_esconv(&raw)
}

/// Parses ESConv JSON text: an array of records with `situation`,
/// `emotion_type`, `problem_type` and a `dialog` list of
/// `{speaker, content, annotation: {strategy}}` messages.
pub fn parse_esconv(raw: &str) -> Result<Vec<Conversation>, CorpusError> {
    let records: Vec<Value> = serde_json::from_str(raw).map_err(CorpusError::Json)?;
    let conversations = records
        .into_iter()
        .enumerate()
        .map(|(index, value)| convert_record(index, value))
        .collect::<Result<Vec<_>, _>>()?;
    check_unique_ids(&conversations)?;
    Ok(conversations)
}

fn convert_record(index: usize, value: Value) -> Result<Conversation, CorpusError> {
    let record: RawRecord =
        serde_json::from_value(value).map_err(|source| CorpusError::Record { index, source })?;
    if record.dialog.is_empty() {
        return Err(CorpusError::EmptyDialog { index });
    }
    let id = match record.id {
        Some(Value::String(s)) if !s.trim().is_empty() => s,
        Some(Value::Number(n)) => n.to_string(),
        None | Some(Value::Null) => format!("esconv-{index:04}"),
        Some(other) => {
            return Err(CorpusError::Invalid {
                index,
                message: format!("unsupported id value {other}"),
            })
        }
    };
    let partition = record
        .split
        .as_deref()
        .map(str::parse::<Partition>)
        .transpose()
        .map_err(|message| CorpusError::Invalid { index, message })?;

    let mut utterances = Vec::with_capacity(record.dialog.len());
    for (pos, msg) in record.dialog.into_iter().enumerate() {
        utterances.push(convert_message(index, pos + 1, msg)?);
    }

    let conv = Conversation {
        id,
        situation: record.situation.trim().to_string(),
        emotion_type: record.emotion_type,
        problem_type: record.problem_type,
        partition,
        utterances,
        metadata: record.extra,
    };
    conv.validate()
        .map_err(|message| CorpusError::Invalid { index, message })?;
    Ok(conv)
}

fn convert_message(record: usize, psi: usize, msg: RawMessage) -> Result<Utterance, CorpusError> {
    let speaker = Speaker::from_source(&msg.speaker).ok_or_else(|| CorpusError::Invalid {
        index: record,
        message: format!("message {psi}: unknown speaker {:?}", msg.speaker),
    })?;

    let mut metadata = msg.extra;
    let mut label = msg.strategy;
    if let Some(annotation) = msg.annotation {
        match annotation {
            Value::Object(mut fields) => {
                if let Some(v) = fields.remove("strategy") {
                    match v {
                        Value::String(s) => label = label.or(Some(s)),
                        Value::Null => {}
                        other => {
                            return Err(CorpusError::Invalid {
                                index: record,
                                message: format!("message {psi}: non-string strategy {other}"),
                            })
                        }
                    }
                }
                if !fields.is_empty() {
                    metadata.insert("annotation".into(), Value::Object(fields));
                }
            }
            Value::Null => {}
            other => {
                metadata.insert("annotation".into(), other);
            }
        }
    }

    let strategy = match label {
        Some(l) if !l.trim().is_empty() => Some(
            l.parse::<Strategy>()
                .map_err(|e| CorpusError::UnknownStrategy { index: record, label: e.0 })?,
        ),
        _ => None,
    };
    if strategy.is_some() && speaker == Speaker::User {
        return Err(CorpusError::Invalid {
            index: record,
            message: format!("message {psi}: seeker message carries a strategy"),
        });
    }

    Ok(Utterance {
        index: psi,
        speaker,
        text: msg.content.trim().to_string(),
        strategy,
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn four_turns() -> Value {
        json!([{
            "experience_type": "Current Experience",
            "emotion_type": "anxiety",
            "problem_type": "job crisis",
            "situation": "I lost my job last week.",
            "dialog": [
                {"speaker": "seeker", "annotation": {}, "content": "Hi, I am not doing well.\n"},
                {"speaker": "supporter", "annotation": {"strategy": "Question"}, "content": "What happened?"},
                {"speaker": "seeker", "annotation": {"feedback": "4"}, "content": "I lost my job last week."},
                {"speaker": "supporter", "annotation": {"strategy": "Reflection of feelings"}, "content": "That sounds really hard."}
            ]
        }])
    }

    #[test]
    fn hand_written_record_maps_field_by_field() {
        let convs = parse_esconv(&four_turns().to_string()).unwrap();
        assert_eq!(convs.len(), 1);
        let c = &convs[0];
        assert_eq!(c.id, "esconv-0000");
        assert_eq!(c.situation, "I lost my job last week.");
        assert_eq!(c.emotion_type, "anxiety");
        assert_eq!(c.problem_type, "job crisis");
        assert_eq!(c.partition, None);
        assert_eq!(c.metadata.get("experience_type"), Some(&json!("Current Experience")));

        let expected = [
            (1, Speaker::User, "Hi, I am not doing well.", None),
            (2, Speaker::System, "What happened?", Some(Strategy::Question)),
            (3, Speaker::User, "I lost my job last week.", None),
            (4, Speaker::System, "That sounds really hard.", Some(Strategy::ReflectionOfFeelings)),
        ];
        assert_eq!(c.utterances.len(), 4);
        for (u, (idx, spk, text, st)) in c.utterances.iter().zip(expected) {
            assert_eq!(u.index, idx);
            assert_eq!(u.speaker, spk);
            assert_eq!(u.text, text);
            assert_eq!(u.strategy, st);
        }
        assert_eq!(c.utterances[2].metadata.get("annotation"), Some(&json!({"feedback": "4"})));
        assert!(c.utterances[0].metadata.is_empty());
    }

    #[test]
    fn empty_array_is_empty_corpus() {
        assert!(parse_esconv("[]").unwrap().is_empty());
        assert!(parse_esconv("  [ ]\n").unwrap().is_empty());
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert!(matches!(parse_esconv("[{"), Err(CorpusError::Json(_))));
    }

    #[test]
    fn bad_record_reports_its_index() {
        let raw = json!([
            four_turns()[0].clone(),
            {"situation": "x", "dialog": "not a list"}
        ]);
        match parse_esconv(&raw.to_string()) {
            Err(CorpusError::Record { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_strategy_names_the_label() {
        let mut raw = four_turns();
        raw[0]["dialog"][1]["annotation"]["strategy"] = json!("Venting");
        match parse_esconv(&raw.to_string()) {
            Err(CorpusError::UnknownStrategy { index, label }) => {
                assert_eq!(index, 0);
                assert_eq!(label, "Venting");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_dialog_is_rejected() {
        let raw = json!([{"situation": "x", "dialog": []}]);
        assert!(matches!(parse_esconv(&raw.to_string()), Err(CorpusError::EmptyDialog { index: 0 })));
    }

    #[test]
    fn consecutive_same_speaker_messages_stay_distinct() {
        let raw = json!([{
            "situation": "s", "emotion_type": "sadness", "problem_type": "breakup",
            "dialog": [
                {"speaker": "seeker", "content": "hello"},
                {"speaker": "seeker", "content": "are you there?"},
                {"speaker": "supporter", "annotation": {"strategy": "Others"}, "content": "yes"}
            ]
        }]);
        let c = &parse_esconv(&raw.to_string()).unwrap()[0];
        assert_eq!(c.utterances.len(), 3);
        assert_eq!(c.utterances[0].speaker, Speaker::User);
        assert_eq!(c.utterances[1].speaker, Speaker::User);
        assert_eq!(c.utterances[1].index, 2);
    }

    #[test]
    fn source_partition_and_id_are_kept() {
        let raw = json!([{
            "id": 17, "split": "valid", "situation": "s",
            "dialog": [
                {"speaker": "seeker", "content": "a"},
                {"speaker": "supporter", "content": "b"}
            ]
        }]);
        let c = &parse_esconv(&raw.to_string()).unwrap()[0];
        assert_eq!(c.id, "17");
        assert_eq!(c.partition, Some(Partition::Validation));
        assert_eq!(c.utterances[1].strategy, None);
    }
}
