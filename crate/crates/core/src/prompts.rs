//! Stage prompt templates.
//!
//! Built-in templates are compiled in; a directory may override any of them
//! by file name. Placeholders use `{{...}}` delimiters.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cell::Signal;
use crate::fst::{admissible_signals, AgentState};

pub const INSTRUCTION_PLACEHOLDER: &str = "{{the description of user instruction}}";
pub const STEP_PLACEHOLDER: &str = "{{the description of current step}}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Initial,
    Planning,
    Execution,
    Debugging,
    PostFiltering,
}

impl PromptKind {
    pub const ALL: [PromptKind; 5] = [
        PromptKind::Initial,
        PromptKind::Planning,
        PromptKind::Execution,
        PromptKind::Debugging,
        PromptKind::PostFiltering,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptKind::Initial => "initial.txt",
            PromptKind::Planning => "planning.txt",
            PromptKind::Execution => "execution.txt",
            PromptKind::Debugging => "debugging.txt",
            PromptKind::PostFiltering => "post_filtering.txt",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            PromptKind::Initial => include_str!("../prompts/initial.txt"),
            PromptKind::Planning => include_str!("../prompts/planning.txt"),
            PromptKind::Execution => include_str!("../prompts/execution.txt"),
            PromptKind::Debugging => include_str!("../prompts/debugging.txt"),
            PromptKind::PostFiltering => include_str!("../prompts/post_filtering.txt"),
        }
    }

    /// Template for a stage. A plan turn with no current step uses the
    /// initial template.
    pub fn for_stage(stage: AgentState, at_root: bool) -> Option<Self> {
        match stage {
            AgentState::Idle => None,
            AgentState::Plan if at_root => Some(PromptKind::Initial),
            AgentState::Plan => Some(PromptKind::Planning),
            AgentState::Exec => Some(PromptKind::Execution),
            AgentState::Debug => Some(PromptKind::Debugging),
            AgentState::Filter => Some(PromptKind::PostFiltering),
        }
    }

    /// Signals the template offers the model.
    pub fn offered_signals(self) -> &'static [Signal] {
        match self {
            PromptKind::Initial => &[Signal::AdvanceNextStep],
            PromptKind::Planning => admissible_signals(AgentState::Plan).expect("plan has signals"),
            PromptKind::Execution => admissible_signals(AgentState::Exec).expect("exec has signals"),
            PromptKind::Debugging => admissible_signals(AgentState::Debug).expect("debug has signals"),
            PromptKind::PostFiltering => admissible_signals(AgentState::Filter).expect("filter has signals"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template {kind:?} does not mention signal {signal}")]
    MissingSignal { kind: PromptKind, signal: Signal },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCatalog {
    templates: BTreeMap<PromptKind, String>,
}

impl Default for PromptCatalog {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptCatalog {
    pub fn builtin() -> Self {
        Self {
            templates: PromptKind::ALL.iter().map(|k| (*k, k.builtin().to_string())).collect(),
        }
    }

    /// Built-in templates overridden by any same-named files in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut catalog = Self::builtin();
        for kind in PromptKind::ALL {
            let path = dir.join(kind.file_name());
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                catalog.templates.insert(kind, text);
            }
        }
        Ok(catalog)
    }

    pub fn set(&mut self, kind: PromptKind, text: impl Into<String>) {
        self.templates.insert(kind, text.into());
    }

    pub fn template(&self, kind: PromptKind) -> &str {
        &self.templates[&kind]
    }

    pub fn render(&self, kind: PromptKind, instruction: &str, step_goal: &str) -> String {
        self.template(kind)
            .replace(INSTRUCTION_PLACEHOLDER, instruction)
            .replace(STEP_PLACEHOLDER, step_goal)
    }

    /// Checks that every template names each signal its stage admits.
    pub fn validate(&self) -> Result<(), PromptError> {
        for kind in PromptKind::ALL {
            if kind == PromptKind::Initial {
                continue;
            }
            let text = self.template(kind);
            for &signal in kind.offered_signals() {
                if !text.contains(signal.prompt_token()) && !text.contains(signal.canonical_token()) {
                    return Err(PromptError::MissingSignal { kind, signal });
                }
            }
        }
        Ok(())
    }

    /// Digest of all templates, recorded with each session's config.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (kind, text) in &self.templates {
            h.update(kind.file_name().as_bytes());
            h.update([0]);
            h.update(text.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_templates_offer_stage_signals() {
        PromptCatalog::builtin().validate().unwrap();
    }

    #[test]
    fn prompts_end_with_response_cue() {
        let c = PromptCatalog::builtin();
        for k in PromptKind::ALL {
            assert!(c.template(k).trim_end().ends_with("Your response:"), "{k:?}");
        }
    }

    #[test]
    fn planning_offers_action_space() {
        let c = PromptCatalog::builtin();
        let p = c.render(PromptKind::Planning, "make a plot", "load the csv");
        assert!(p.contains("make a plot"));
        assert!(p.contains("[STEP GOAL]: load the csv"));
        assert!(p.contains("Available Action Space: {<Iterate on Current STEP>, <Advance to Next STEP>, <Fulfill USER INSTRUCTION>}"));
        assert!(!p.contains("{{"));
    }

    #[test]
    fn filter_offers_exactly_two() {
        let c = PromptCatalog::builtin();
        assert!(c
            .template(PromptKind::PostFiltering)
            .contains("Available Action Space: {<debug_success>, <debug_failure>}"));
    }

    #[test]
    fn override_dir_changes_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let base = PromptCatalog::builtin();
        std::fs::write(dir.path().join("execution.txt"), "edited <await> <end_step>").unwrap();
        let edited = PromptCatalog::load_dir(dir.path()).unwrap();
        assert_eq!(edited.template(PromptKind::Execution), "edited <await> <end_step>");
        assert_eq!(edited.template(PromptKind::Planning), base.template(PromptKind::Planning));
        assert_ne!(edited.fingerprint(), base.fingerprint());
    }

    #[test]
    fn stage_mapping() {
        assert_eq!(PromptKind::for_stage(AgentState::Plan, true), Some(PromptKind::Initial));
        assert_eq!(PromptKind::for_stage(AgentState::Plan, false), Some(PromptKind::Planning));
        assert_eq!(PromptKind::for_stage(AgentState::Idle, false), None);
    }
}
