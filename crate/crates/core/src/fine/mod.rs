//! Stage 2: LM verification of coarse matches and instruction synthesis.

pub mod parse;
pub mod prompts;

use serde::{Deserialize, Serialize};

use crate::chunk::Chunk;
use crate::coarse::CoarseMatch;
use crate::gateway::{Completion, LmBackend};
use crate::profile::{Preference, PreferenceProfile};
use crate::{Error, Result, Scalar};

pub use parse::{parse_decision, parse_instruction};
pub use prompts::PromptTemplates;

/// Rationale recorded when the decision response never parsed.
pub const PARSE_FAILURE: &str = "parse-failure";

pub const DEFAULT_MAX_RETRIES: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Keep,
    Discard,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Keep => "Keep",
            Decision::Discard => "Discard",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub decision: Decision,
    pub rationale: String,
    /// Ids of the candidate preferences the chunk was kept for; empty on Discard.
    pub refined_preferences: Vec<String>,
    pub confidence: Option<f64>,
}

impl DecisionRecord {
    pub fn discard(rationale: impl Into<String>) -> Self {
        Self {
            decision: Decision::Discard,
            rationale: rationale.into(),
            refined_preferences: Vec::new(),
            confidence: None,
        }
    }

    pub fn is_keep(&self) -> bool {
        self.decision == Decision::Keep
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub chunk_id: String,
    pub preference_id: String,
}

/// A verification outcome plus the number of LM requests it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub record: DecisionRecord,
    pub attempts: u32,
}

#[derive(Debug)]
pub struct InstructionBatch {
    pub instructions: Vec<Instruction>,
    /// One entry per (chunk, preference) pair that produced no instruction.
    pub failures: Vec<(String, Error)>,
    pub attempts: u32,
}

/// Probability of the decision token, when the backend reported log-probabilities.
fn decision_confidence(completion: &Completion, decision: Decision) -> Option<f64> {
    completion
        .logprobs
        .as_ref()?
        .iter()
        .find(|t| t.token.trim() == decision.as_str())
        .map(|t| t.logprob.exp().clamp(0.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct FineVerifier {
    templates: PromptTemplates,
    max_retries: u32,
}

impl Default for FineVerifier {
    fn default() -> Self {
        Self::new(PromptTemplates::default())
    }
}

impl FineVerifier {
    pub fn new(templates: PromptTemplates) -> Self {
        Self {
            templates,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }

    pub fn with_max_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    /// Candidate preferences of a match, in profile order.
    fn candidates<'p, T: Scalar>(
        m: &CoarseMatch<T>,
        profile: &'p PreferenceProfile<T>,
    ) -> Vec<&'p Preference<T>> {
        profile
            .iter()
            .filter(|p| m.matched.iter().any(|(id, _)| id == &p.id))
            .collect()
    }

    /// Runs the decision prompt for one coarse match. Responses that never
    /// parse within the retry budget yield a Discard with [`PARSE_FAILURE`].
    pub fn verify<T: Scalar>(
        &self,
        m: &CoarseMatch<T>,
        profile: &PreferenceProfile<T>,
        lm: &dyn LmBackend,
    ) -> Result<Verification> {
        if m.matched.is_empty() {
            return Err(Error::Precondition(
                "coarse match has no preferences".into(),
            ));
        }
        let allowed = Self::candidates(m, profile);
        let prompt = self.templates.render_decision(&m.chunk, &allowed)?;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let completion = lm.complete(&prompt)?;
            match parse_decision(&completion.text, &allowed) {
                Ok(mut record) => {
                    record.confidence = decision_confidence(&completion, record.decision);
                    return Ok(Verification { record, attempts });
                }
                Err(Error::MalformedResponse(why)) if attempts <= self.max_retries => {
                    tracing::debug!(chunk = %m.chunk.id, %why, attempts, "re-asking for decision");
                }
                Err(Error::MalformedResponse(why)) => {
                    tracing::warn!(chunk = %m.chunk.id, %why, "decision unparseable; discarding");
                    return Ok(Verification {
                        record: DecisionRecord::discard(PARSE_FAILURE),
                        attempts,
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// One instruction per refined preference of a kept chunk. Pairs whose
    /// response never parses are skipped and reported in `failures`.
    pub fn generate_instructions<T: Scalar>(
        &self,
        chunk: &Chunk,
        record: &DecisionRecord,
        profile: &PreferenceProfile<T>,
        lm: &dyn LmBackend,
    ) -> Result<InstructionBatch> {
        if !record.is_keep() {
            return Err(Error::Precondition(
                "instructions are generated for kept chunks only".into(),
            ));
        }
        let mut batch = InstructionBatch {
            instructions: Vec::new(),
            failures: Vec::new(),
            attempts: 0,
        };
        for pref_id in &record.refined_preferences {
            let Some(pref) = profile.get(pref_id) else {
                batch
                    .failures
                    .push((pref_id.clone(), Error::UnknownPreference(pref_id.clone())));
                continue;
            };
            let prompt = self
                .templates
                .render_instruction(chunk, pref, &record.rationale)?;
            let mut tries = 0;
            let outcome = loop {
                tries += 1;
                batch.attempts += 1;
                match lm
                    .complete(&prompt)
                    .and_then(|c| parse_instruction(&c.text))
                {
                    Err(Error::MalformedResponse(_)) if tries <= self.max_retries => continue,
                    other => break other,
                }
            };
            match outcome {
                Ok(text) => batch.instructions.push(Instruction {
                    text,
                    chunk_id: chunk.id.clone(),
                    preference_id: pref.id.clone(),
                }),
                Err(e) => {
                    tracing::warn!(chunk = %chunk.id, preference = %pref.id, error = %e, "no instruction");
                    batch.failures.push((pref.id.clone(), e));
                }
            }
        }
        Ok(batch)
    }
}
