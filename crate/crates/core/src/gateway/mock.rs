//! Deterministic offline backends for tests and `--mock` runs.

use std::collections::{BTreeSet, HashMap};
use std::hash::Hasher;

use fnv::FnvHasher;
use quick_xml::escape::escape;
use sha2::{Digest, Sha256};

use super::{Completion, DecodeConfig, EncoderBackend, LmBackend, TokenLogprob};
use crate::{Error, Result};

pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "about", "all", "also", "am", "an", "and", "any", "are", "as", "at", "be", "because",
    "been", "but", "by", "can", "could", "do", "does", "don't", "for", "from", "had", "has",
    "have", "how", "i", "i'm", "if", "in", "into", "is", "it", "its", "just", "like", "me", "more",
    "most", "my", "no", "not", "of", "on", "only", "or", "other", "our", "prefer", "so", "some",
    "such", "than", "that", "the", "their", "them", "then", "there", "these", "they", "this", "to",
    "too", "very", "was", "we", "what", "when", "which", "who", "will", "with", "would", "you",
    "your",
];

const STOPWORD_WEIGHT: f64 = 0.1;
const UNIGRAM_WEIGHT: f64 = 1.0;
const BIGRAM_WEIGHT: f64 = 0.5;

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\'').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn is_stopword(token: &str, stopwords: &[String]) -> bool {
    stopwords.iter().any(|s| s == token)
}

/// Lowercased alphanumeric tokens of `text` minus `stopwords`, deduplicated.
pub fn content_words(text: &str, stopwords: &[String]) -> BTreeSet<String> {
    tokens(text)
        .into_iter()
        .filter(|t| !is_stopword(t, stopwords))
        .collect()
}

fn default_stopwords() -> Vec<String> {
    DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashed word n-gram encoder.
///
/// Every unigram and adjacent bigram is projected onto two distinct signed
/// coordinates chosen by a seeded hash, so texts sharing words share
/// coordinates and score a higher cosine than unrelated texts.
#[derive(Debug, Clone)]
pub struct MockEncoder {
    seed: u64,
    dim: usize,
    stopwords: Vec<String>,
    fingerprint: String,
}

impl MockEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= 2, "mock encoder needs at least two dimensions");
        Self {
            seed,
            dim,
            stopwords: default_stopwords(),
            fingerprint: format!("mock-ngram-v1:seed={seed}:dim={dim}"),
        }
    }

    fn feature_hash(&self, feature: &str) -> u64 {
        let mut h = FnvHasher::default();
        h.write_u64(self.seed);
        h.write(feature.as_bytes());
        h.finish()
    }

    fn add_feature(&self, out: &mut [f64], feature: &str, weight: f64) {
        let r1 = splitmix(self.feature_hash(feature));
        let r2 = splitmix(r1);
        let i1 = (r1 % self.dim as u64) as usize;
        let i2 = (i1 + 1 + (r2 % (self.dim as u64 - 1)) as usize) % self.dim;
        let s1 = if r1 >> 63 == 0 { 1.0 } else { -1.0 };
        let s2 = if r2 >> 63 == 0 { 1.0 } else { -1.0 };
        out[i1] += s1 * weight;
        out[i2] += s2 * weight;
    }

    fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let toks = tokens(text);
        if toks.is_empty() {
            self.add_feature(&mut out, text.trim(), UNIGRAM_WEIGHT);
            return out;
        }
        let mut prev: Option<&str> = None;
        for tok in &toks {
            if is_stopword(tok, &self.stopwords) {
                self.add_feature(&mut out, tok, STOPWORD_WEIGHT);
                continue;
            }
            self.add_feature(&mut out, tok, UNIGRAM_WEIGHT);
            if let Some(p) = prev {
                self.add_feature(&mut out, &format!("{p} {tok}"), BIGRAM_WEIGHT);
            }
            prev = Some(tok);
        }
        out
    }
}

impl EncoderBackend for MockEncoder {
    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[derive(Debug, Clone)]
pub enum MockScript {
    AlwaysKeep,
    AlwaysDiscard,
    /// Keep iff the chunk shares a non-stopword with some preference; every
    /// such preference is listed.
    KeywordOverlap {
        stopwords: Vec<String>,
    },
    /// Responses keyed by [`MockLm::fixture_key`] of the prompt.
    FixtureReplay(HashMap<String, String>),
}

impl MockScript {
    pub fn keyword_overlap() -> Self {
        MockScript::KeywordOverlap {
            stopwords: default_stopwords(),
        }
    }
}

/// Scripted LM answering decision and instruction prompts in the XML
/// response schema.
#[derive(Debug, Clone)]
pub struct MockLm {
    script: MockScript,
    decision_logprob: Option<f64>,
    fingerprint: String,
}

impl MockLm {
    pub fn new(script: MockScript) -> Self {
        let name = match &script {
            MockScript::AlwaysKeep => "always-keep",
            MockScript::AlwaysDiscard => "always-discard",
            MockScript::KeywordOverlap { .. } => "keyword-overlap",
            MockScript::FixtureReplay(_) => "fixture-replay",
        };
        Self {
            script,
            decision_logprob: None,
            fingerprint: format!("mock-lm:{name}"),
        }
    }

    /// Attach a log-probability to the decision token of every decision response.
    pub fn with_decision_logprob(mut self, logprob: f64) -> Self {
        self.decision_logprob = Some(logprob);
        self
    }

    pub fn fixture_key(prompt: &str) -> String {
        hex::encode(Sha256::digest(prompt.as_bytes()))
    }

    fn decision(&self, decision: &str, reason: &str, prefs: &[&str]) -> Completion {
        let mut xml = format!("<answer>\n<decision>{decision}</decision>\n");
        if !prefs.is_empty() {
            xml.push_str("<relevant_preferences>\n");
            for p in prefs {
                xml.push_str(&format!("<preference>{}</preference>\n", escape(*p)));
            }
            xml.push_str("</relevant_preferences>\n");
        }
        xml.push_str(&format!("<reason>{}</reason>\n</answer>", escape(reason)));
        Completion {
            text: xml,
            logprobs: self.decision_logprob.map(|lp| {
                vec![TokenLogprob {
                    token: decision.to_string(),
                    logprob: lp,
                }]
            }),
        }
    }

    fn answer_decision(&self, prompt: &str) -> Completion {
        let prefs: Vec<&str> = section(prompt, "user_preferences")
            .unwrap_or_default()
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        let chunk = section(prompt, "given_chunk").unwrap_or_default();
        match &self.script {
            MockScript::AlwaysKeep => self.decision(
                "Keep",
                "The chunk is relevant to the listed preferences.",
                &prefs,
            ),
            MockScript::AlwaysDiscard => self.decision(
                "Discard",
                "The chunk is unrelated to the listed preferences.",
                &[],
            ),
            MockScript::KeywordOverlap { stopwords } => {
                let chunk_words = content_words(chunk, stopwords);
                let mut shared = BTreeSet::new();
                let mut matched = Vec::new();
                for p in &prefs {
                    let overlap: Vec<_> = content_words(p, stopwords)
                        .intersection(&chunk_words)
                        .cloned()
                        .collect();
                    if !overlap.is_empty() {
                        matched.push(*p);
                        shared.extend(overlap);
                    }
                }
                if matched.is_empty() {
                    self.decision(
                        "Discard",
                        "The chunk shares no terms with any preference.",
                        &[],
                    )
                } else {
                    let words: Vec<_> = shared.into_iter().collect();
                    let reason = format!("The chunk mentions {}.", words.join(", "));
                    self.decision("Keep", &reason, &matched)
                }
            }
            MockScript::FixtureReplay(_) => unreachable!("fixture replay handled by caller"),
        }
    }

    fn answer_instruction(&self, prompt: &str) -> Completion {
        let pref = section(prompt, "user_preferences")
            .unwrap_or_default()
            .trim();
        let chunk = section(prompt, "given_chunk").unwrap_or_default();
        let stopwords = match &self.script {
            MockScript::KeywordOverlap { stopwords } => stopwords.clone(),
            _ => default_stopwords(),
        };
        let shared: Vec<_> = content_words(pref, &stopwords)
            .intersection(&content_words(chunk, &stopwords))
            .cloned()
            .collect();
        let focus = if shared.is_empty() {
            "the passage".to_string()
        } else {
            shared.join(", ")
        };
        Completion::text(format!(
            "<instruction>Focus on {} w.r.t. {}</instruction>",
            escape(focus.as_str()),
            escape(pref)
        ))
    }
}

/// Text between `<tag>\n` and the following `\n</tag>`.
fn section<'a>(prompt: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>\n");
    let close = format!("\n</{tag}>");
    let start = prompt.find(&open)? + open.len();
    let len = prompt[start..].find(&close)?;
    Some(&prompt[start..start + len])
}

impl LmBackend for MockLm {
    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn decode_config(&self) -> DecodeConfig {
        DecodeConfig::default()
    }

    fn complete(&self, prompt: &str) -> Result<Completion> {
        if let MockScript::FixtureReplay(map) = &self.script {
            let key = Self::fixture_key(prompt);
            return map
                .get(&key)
                .map(|r| Completion::text(r.clone()))
                .ok_or(Error::FixtureMiss(key));
        }
        if prompt.contains("generate interpretation instructions") {
            Ok(self.answer_instruction(prompt))
        } else {
            Ok(self.answer_decision(prompt))
        }
    }
}
