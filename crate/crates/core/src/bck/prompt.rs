//! Extraction prompt template.
//!
//! Layout: `[ROLE]` preamble, `[TASK]` with Step 1 (define the window) and
//! Step 2 (the component/perspective subtask), then `Input:` (the rendered
//! window), `Output:` (format instruction) and the closing accumulation
//! instruction with its `none` sentinel.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BckError, CognitiveComponent, Perspective};
use crate::discourse::ContextWindow;

const LAYOUT_REVISION: &str = "extraction-prompt/1";

const ROLE_PREAMBLE: &str = "Cognitive psychologists specializing in cognitive theories: \
Theory-of-Mind (ToM), psychological expected utility (PEU) and cognitive rationality.";

const STEP_ONE: &str = "Define θ, the discourse context propagation window: the utterances listed under Input, \
which immediately precede the utterance under analysis in an emotional support conversation between \
a system (the supporter) and a user (the seeker).";

const OUTPUT_INSTRUCTION: &str = "A JSON array of strings. Copy every term exactly as it appears in the Input, \
for example [\"first term\", \"second term\"].";

pub(crate) fn subtask_name(component: CognitiveComponent) -> &'static str {
    match component {
        CognitiveComponent::Btm => "bidirectional Theory-of-Mind (BTM) synthesis",
        CognitiveComponent::Peu => "BTM-based psychological expected utility (PEU) synthesis",
        CognitiveComponent::Bcr => "BTM-based cognitive rationality (BCR) synthesis",
    }
}

pub(crate) fn perspective_clause(component: CognitiveComponent, perspective: Perspective) -> &'static str {
    use CognitiveComponent::*;
    use Perspective::*;
    match (component, perspective) {
        (Btm, SystemSide) => "that the system prioritizes in developing its ToM about the user",
        (Btm, UserSide) => "that the user prioritizes in developing its ToM about the system",
        (Peu, SystemSide) => "that comply with the system's expectation to improve the user's mental state",
        (Peu, UserSide) => "that comply with the user's expectation to gain assistance from the system",
        (Bcr, SystemSide) => {
            "that indicate the system's rationale for understanding the user's immediate cognitive, \
             emotional, and behavioral states"
        }
        (Bcr, UserSide) => {
            "that indicate the user's cognitive rationality resulting in the system's immediate cognitive, \
             emotional, and behavioral states"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionPrompt {
    pub role_preamble: String,
    pub subtask: CognitiveComponent,
    pub perspective: Perspective,
    pub window_text: String,
    pub output_instruction: String,
}

impl ExtractionPrompt {
    pub fn perspective_clause(&self) -> &'static str {
        perspective_clause(self.subtask, self.perspective)
    }

    pub fn render(&self) -> String {
        let name = subtask_name(self.subtask);
        format!(
            "[ROLE]\n{role}\n[TASK]\nStep 1: {step1}\nStep 2: Perform {name}: extract terms from θ {clause}.\n\
             Input:\n{window}\nOutput:\n{output}\n\
             Accumulate extracted terms that you prioritize to derive the {name}. If no term is identified, output none.",
            role = self.role_preamble,
            step1 = STEP_ONE,
            clause = self.perspective_clause(),
            window = self.window_text,
            output = self.output_instruction,
        )
    }
}

/// Prompt for one (component, perspective) subtask over a non-empty window.
pub fn build_prompt(
    window: &ContextWindow,
    component: CognitiveComponent,
    perspective: Perspective,
) -> Result<ExtractionPrompt, BckError> {
    if window.is_empty() {
        return Err(BckError::EmptyWindow {
            conversation_id: window.conversation_id.clone(),
            utterance_index: window.target_index,
        });
    }
    Ok(ExtractionPrompt {
        role_preamble: ROLE_PREAMBLE.to_string(),
        subtask: component,
        perspective,
        window_text: window.rendered_text.clone(),
        output_instruction: OUTPUT_INSTRUCTION.to_string(),
    })
}

/// Short digest of every template constant; part of each cache key so an
/// edited template never reuses stale extractions.
pub fn prompt_version() -> &'static str {
    static VERSION: OnceLock<String> = OnceLock::new();
    VERSION.get_or_init(|| {
        let mut h = Sha256::new();
        for part in [LAYOUT_REVISION, ROLE_PREAMBLE, STEP_ONE, OUTPUT_INSTRUCTION] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        for c in CognitiveComponent::ALL {
            h.update(subtask_name(c).as_bytes());
            for p in Perspective::ALL {
                h.update(perspective_clause(c, p).as_bytes());
            }
        }
        // Covers the render() layout itself.
        let probe = ExtractionPrompt {
            role_preamble: String::new(),
            subtask: CognitiveComponent::Btm,
            perspective: Perspective::SystemSide,
            window_text: "{window}".into(),
            output_instruction: String::new(),
        };
        h.update(probe.render().as_bytes());
        hex::encode(&h.finalize()[..8])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Metadata, Speaker, Utterance};
    use crate::corpus::Conversation;
    use crate::discourse::window;

    fn win() -> ContextWindow {
        let conv = Conversation {
            id: "c".into(),
            situation: "s".into(),
            emotion_type: "e".into(),
            problem_type: "p".into(),
            partition: None,
            utterances: vec![
                Utterance::new(1, Speaker::User, "I lost my job last week"),
                Utterance::new(2, Speaker::System, "I am sorry to hear that"),
                Utterance::new(3, Speaker::User, "Thanks"),
            ],
            metadata: Metadata::new(),
        };
        window(&conv, 3, 5).unwrap()
    }

    #[test]
    fn btm_system_side_asks_for_tom_about_the_user() {
        let p = build_prompt(&win(), CognitiveComponent::Btm, Perspective::SystemSide).unwrap().render();
        let step2 = p.lines().find(|l| l.starts_with("Step 2:")).unwrap();
        assert!(step2.contains("developing its ToM about the user"), "{step2}");
    }

    #[test]
    fn peu_user_side_asks_for_assistance_expectation() {
        let p = build_prompt(&win(), CognitiveComponent::Peu, Perspective::UserSide).unwrap().render();
        assert!(p.contains("expectation to gain assistance from the system"));
        let s = build_prompt(&win(), CognitiveComponent::Peu, Perspective::SystemSide).unwrap().render();
        assert!(s.contains("comply with the system's expectation to improve the user's mental state"));
    }

    #[test]
    fn bcr_prompts_differ_only_in_the_perspective_clause() {
        let sys = build_prompt(&win(), CognitiveComponent::Bcr, Perspective::SystemSide).unwrap();
        let usr = build_prompt(&win(), CognitiveComponent::Bcr, Perspective::UserSide).unwrap();
        assert_ne!(sys.render(), usr.render());
        assert_eq!(
            sys.render().replace(sys.perspective_clause(), "<clause>"),
            usr.render().replace(usr.perspective_clause(), "<clause>")
        );
    }

    #[test]
    fn template_order_and_sections() {
        let p = build_prompt(&win(), CognitiveComponent::Btm, Perspective::UserSide).unwrap().render();
        let pos = |needle: &str| p.find(needle).unwrap_or_else(|| panic!("missing {needle}"));
        assert!(pos("[ROLE]") < pos("[TASK]"));
        assert!(pos("Step 1:") < pos("Step 2:"));
        assert!(pos("Step 2:") < pos("Input:\n"));
        assert!(pos("Input:\n") < pos("User: I lost my job last week"));
        assert!(pos("System: I am sorry to hear that") < pos("Output:\n"));
        assert!(p.ends_with("If no term is identified, output none."));
    }

    #[test]
    fn empty_window_is_a_precondition_error() {
        let mut w = win();
        w.members.clear();
        assert!(matches!(
            build_prompt(&w, CognitiveComponent::Btm, Perspective::UserSide),
            Err(BckError::EmptyWindow { .. })
        ));
    }

    #[test]
    fn prompt_version_is_stable_hex() {
        assert_eq!(prompt_version().len(), 16);
        assert_eq!(prompt_version(), prompt_version());
    }
}
