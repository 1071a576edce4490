//! Decision and instruction prompt templates with `{slot}` substitution.

use std::path::Path;

use crate::chunk::Chunk;
use crate::profile::Preference;
use crate::{Error, Result, Scalar};

pub const DEFAULT_DECISION_TEMPLATE: &str = include_str!("../../templates/decision.txt");
pub const DEFAULT_INSTRUCTION_TEMPLATE: &str = include_str!("../../templates/instruction.txt");

const DECISION_SLOTS: &[&str] = &["preference", "chunk"];
const INSTRUCTION_SLOTS: &[&str] = &["preference", "chunk", "reason"];

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    decision: String,
    instruction: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            decision: DEFAULT_DECISION_TEMPLATE.to_string(),
            instruction: DEFAULT_INSTRUCTION_TEMPLATE.to_string(),
        }
    }
}

fn check_slots(template: &str, slots: &[&str], which: &str) -> Result<()> {
    for slot in slots {
        if !template.contains(&format!("{{{slot}}}")) {
            return Err(Error::InvalidConfig(format!(
                "{which} template lacks the {{{slot}}} slot"
            )));
        }
    }
    Ok(())
}

impl PromptTemplates {
    pub fn new(decision: impl Into<String>, instruction: impl Into<String>) -> Result<Self> {
        let t = Self {
            decision: decision.into(),
            instruction: instruction.into(),
        };
        check_slots(&t.decision, DECISION_SLOTS, "decision")?;
        check_slots(&t.instruction, INSTRUCTION_SLOTS, "instruction")?;
        Ok(t)
    }

    /// Loads overrides; a `None` path keeps the built-in template.
    pub fn from_files(decision: Option<&Path>, instruction: Option<&Path>) -> Result<Self> {
        let read = |p: Option<&Path>, default: &str| -> Result<String> {
            match p {
                Some(p) => Ok(std::fs::read_to_string(p)?),
                None => Ok(default.to_string()),
            }
        };
        Self::new(
            read(decision, DEFAULT_DECISION_TEMPLATE)?,
            read(instruction, DEFAULT_INSTRUCTION_TEMPLATE)?,
        )
    }

    /// Lists preferences one per line, verbatim and in the given order.
    pub fn render_decision<T: Scalar>(
        &self,
        chunk: &Chunk,
        prefs: &[&Preference<T>],
    ) -> Result<String> {
        if prefs.is_empty() {
            return Err(Error::Precondition(
                "decision prompt needs at least one preference".into(),
            ));
        }
        let listed = prefs
            .iter()
            .map(|p| p.text.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        Ok(fill(
            &self.decision,
            &[("preference", &listed), ("chunk", &chunk.text)],
        ))
    }

    pub fn render_instruction<T: Scalar>(
        &self,
        chunk: &Chunk,
        pref: &Preference<T>,
        rationale: &str,
    ) -> Result<String> {
        if rationale.trim().is_empty() {
            return Err(Error::Precondition(
                "instruction prompt needs a non-empty rationale".into(),
            ));
        }
        Ok(fill(
            &self.instruction,
            &[
                ("preference", &pref.text),
                ("chunk", &chunk.text),
                ("reason", rationale),
            ],
        ))
    }
}

/// Single left-to-right pass, so slot-like text inside substituted values is
/// never expanded again.
fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    'outer: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for (name, value) in slots {
            let key = format!("{{{name}}}");
            if tail.starts_with(&key) {
                out.push_str(value);
                rest = &tail[key.len()..];
                continue 'outer;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockEncoder;
    use crate::profile::PreferenceProfile;

    fn profile(texts: &[&str]) -> PreferenceProfile<f32> {
        PreferenceProfile::from_texts(texts, &MockEncoder::new(0, 16)).unwrap()
    }

    #[test]
    fn decision_prompt_contains_texts() {
        let p = profile(&["I only eat vegan food"]);
        let chunk = Chunk::new("c", "Bone china contains animal bone ash.");
        let out = PromptTemplates::default()
            .render_decision(&chunk, &p.iter().collect::<Vec<_>>())
            .unwrap();
        assert!(out.contains("<user_preferences>\nI only eat vegan food\n</user_preferences>"));
        assert!(out.contains("<given_chunk>\nBone china contains animal bone ash.\n</given_chunk>"));
        assert!(out.starts_with("<identity>\n"));
        assert!(out.ends_with("<answer>\n"));
        assert!(!out.contains("{preference}") && !out.contains("{chunk}"));
    }

    #[test]
    fn decision_prompt_keeps_profile_order() {
        let p = profile(&["alpha pref", "beta pref", "gamma pref"]);
        let out = PromptTemplates::default()
            .render_decision(&Chunk::new("c", "x"), &p.iter().collect::<Vec<_>>())
            .unwrap();
        let a = out.find("alpha pref").unwrap();
        let b = out.find("beta pref").unwrap();
        let g = out.find("gamma pref").unwrap();
        assert!(a < b && b < g);
    }

    #[test]
    fn decision_prompt_requires_preferences() {
        let r = PromptTemplates::default().render_decision::<f32>(&Chunk::new("c", "x"), &[]);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn instruction_prompt_slots_once() {
        let p = profile(&["PREF-TEXT"]);
        let out = PromptTemplates::default()
            .render_instruction(
                &Chunk::new("c", "CHUNK-TEXT"),
                &p.preferences()[0],
                "REASON-TEXT",
            )
            .unwrap();
        for s in ["PREF-TEXT", "CHUNK-TEXT", "REASON-TEXT"] {
            assert_eq!(out.matches(s).count(), 1, "{s}");
        }
        assert!(out.contains("<reason>\nREASON-TEXT\n</reason>"));
    }

    #[test]
    fn instruction_prompt_requires_rationale() {
        let p = profile(&["x"]);
        let r = PromptTemplates::default().render_instruction(
            &Chunk::new("c", "y"),
            &p.preferences()[0],
            " ",
        );
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn slot_text_inside_values_is_literal() {
        let p = profile(&["likes {chunk} braces"]);
        let out = PromptTemplates::default()
            .render_instruction(&Chunk::new("c", "body {reason}"), &p.preferences()[0], "r")
            .unwrap();
        assert!(out.contains("likes {chunk} braces"));
        assert!(out.contains("body {reason}"));
    }

    #[test]
    fn override_must_keep_slots() {
        assert!(PromptTemplates::new("no slots", DEFAULT_INSTRUCTION_TEMPLATE).is_err());
        let t =
            PromptTemplates::new("P={preference} C={chunk}", DEFAULT_INSTRUCTION_TEMPLATE).unwrap();
        let p = profile(&["a"]);
        assert_eq!(
            t.render_decision(&Chunk::new("c", "b"), &[&p.preferences()[0]])
                .unwrap(),
            "P=a C=b"
        );
    }
}
