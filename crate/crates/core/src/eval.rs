//! Rubric aggregation, judge-free retrieval metrics, and the ablation runner.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::chunk::Chunk;
use crate::coarse::DEFAULT_TAU;
use crate::gateway::{EncoderBackend, LmBackend};
use crate::memory::MemoryStore;
use crate::profile::PreferenceProfile;
use crate::retrieval::{retrieve, RetrievalResult, DEFAULT_K};
use crate::streaming::{PipelineConfig, Session};
use crate::{Error, Result, Scalar};

/// The four failure modes a judge may flag on a response.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub unaware: bool,
    pub hallucination: bool,
    pub inconsistent: bool,
    pub unhelpful: bool,
}

impl JudgeVerdict {
    pub fn is_clean(&self) -> bool {
        !(self.unaware || self.hallucination || self.inconsistent || self.unhelpful)
    }
}

/// Fraction of verdicts with no error flag set.
pub fn accuracy(verdicts: &[JudgeVerdict]) -> Result<f64> {
    if verdicts.is_empty() {
        return Err(Error::EmptyInput);
    }
    let clean = verdicts.iter().filter(|v| v.is_clean()).count();
    Ok(clean as f64 / verdicts.len() as f64)
}

/// Reads a judge response carrying one yes/no element per error type.
pub fn parse_judge_verdict(raw: &str) -> Result<JudgeVerdict> {
    let flag = |tag: &str| -> Result<bool> {
        let open = format!("<{tag}>");
        let close = format!("</{tag}>");
        let start = raw
            .find(&open)
            .ok_or_else(|| Error::MalformedResponse(format!("missing <{tag}>")))?
            + open.len();
        let end = raw[start..]
            .find(&close)
            .ok_or_else(|| Error::MalformedResponse(format!("unterminated <{tag}>")))?;
        match raw[start..start + end].trim().to_ascii_lowercase().as_str() {
            "yes" | "true" => Ok(true),
            "no" | "false" => Ok(false),
            other => Err(Error::MalformedResponse(format!("<{tag}> holds {other:?}"))),
        }
    };
    Ok(JudgeVerdict {
        unaware: flag("unaware")?,
        hallucination: flag("hallucination")?,
        inconsistent: flag("inconsistent")?,
        unhelpful: flag("unhelpful")?,
    })
}

/// Asks `lm` to grade one response with a user-supplied template holding
/// `{preference}`, `{question}` and `{response}` slots.
pub fn judge(
    lm: &dyn LmBackend,
    template: &str,
    preference: &str,
    question: &str,
    response: &str,
) -> Result<JudgeVerdict> {
    let prompt = template
        .replace("{preference}", preference)
        .replace("{question}", question)
        .replace("{response}", response);
    parse_judge_verdict(&lm.complete(&prompt)?.text)
}

/// Share of retrieved entries that are in `relevant`; 0 when nothing was retrieved.
pub fn preference_precision_at_k<T: Scalar>(
    result: &RetrievalResult<'_, T>,
    relevant: &HashSet<u64>,
) -> f64 {
    if result.entries.is_empty() {
        return 0.0;
    }
    let hits = result
        .entries
        .iter()
        .filter(|(e, _)| relevant.contains(&e.entry_id))
        .count();
    hits as f64 / result.entries.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub coarse: bool,
    pub fine: bool,
    pub steering: bool,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_k() -> usize {
    DEFAULT_K
}

impl AblationConfig {
    pub fn new(coarse: bool, fine: bool, steering: bool) -> Self {
        Self {
            coarse,
            fine,
            steering,
            tau: DEFAULT_TAU,
            k: DEFAULT_K,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    /// `C`, `F`, `S` joined by `+`, or `raw` when every stage is off.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.coarse, "C"), (self.fine, "F"), (self.steering, "S")]
            .into_iter()
            .filter_map(|(on, name)| on.then_some(name))
            .collect();
        if parts.is_empty() {
            "raw".into()
        } else {
            parts.join("+")
        }
    }

    /// The incremental ladder: raw, C, C+F, C+F+S.
    pub fn ladder() -> Vec<Self> {
        vec![
            Self::new(false, false, false),
            Self::new(true, false, false),
            Self::new(true, true, false),
            Self::new(true, true, true),
        ]
    }
}

/// A query with the chunk ids that count as relevant to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationQuery {
    pub text: String,
    pub relevant_chunks: HashSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub config: String,
    pub tau: f64,
    pub k: usize,
    pub precision_at_k: f64,
    pub footprint_bytes: usize,
    pub store_entries: usize,
    pub coarse_retained: u64,
    pub index_ms: f64,
    pub query_ms: f64,
}

pub const ABLATION_CSV_HEADER: &str =
    "config,tau,k,precision_at_k,footprint_bytes,index_ms,query_ms";

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{},{:.3},{:.3}\n",
            r.config, r.tau, r.k, r.precision_at_k, r.footprint_bytes, r.index_ms, r.query_ms
        ));
    }
    out
}

/// Builds one store per config from the same corpus and profile, then scores
/// every query against it.
pub fn run_ablation<T: Scalar>(
    corpus: &[Chunk],
    profile: &PreferenceProfile<T>,
    queries: &[AblationQuery],
    configs: &[AblationConfig],
    encoder: &dyn EncoderBackend,
    lm: &dyn LmBackend,
) -> Result<Vec<AblationRow>> {
    if configs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let pipeline = PipelineConfig {
            tau: cfg.tau,
            coarse: cfg.coarse,
            fine: cfg.fine,
            ..PipelineConfig::default()
        };
        let mut session = Session::new(
            profile.clone(),
            MemoryStore::new(encoder.dim()),
            encoder,
            lm,
            pipeline,
        )?;
        let t = Instant::now();
        session.ingest_batch(corpus)?;
        let index_ms = t.elapsed().as_secs_f64() * 1e3;
        let store = &session.store;

        let t = Instant::now();
        let mut precision = 0.0;
        for q in queries {
            let result = retrieve(&q.text, profile, store, cfg.k, cfg.steering, encoder)?;
            let relevant: HashSet<u64> = store
                .entries()
                .iter()
                .filter(|e| q.relevant_chunks.contains(&e.chunk.id))
                .map(|e| e.entry_id)
                .collect();
            precision += preference_precision_at_k(&result, &relevant);
        }
        let query_ms = if queries.is_empty() {
            0.0
        } else {
            t.elapsed().as_secs_f64() * 1e3 / queries.len() as f64
        };
        rows.push(AblationRow {
            config: cfg.label(),
            tau: cfg.tau,
            k: cfg.k,
            precision_at_k: if queries.is_empty() {
                0.0
            } else {
                precision / queries.len() as f64
            },
            footprint_bytes: store.memory_footprint(),
            store_entries: store.len(),
            coarse_retained: session.stats().counts.coarse_retained,
            index_ms,
            query_ms,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fine::Instruction;
    use crate::gateway::{MockEncoder, MockLm, MockScript};
    use crate::memory::MemoryEntry;
    use crate::retrieval::StageTimings;
    use crate::Vector;

    fn v(flags: [bool; 4]) -> JudgeVerdict {
        JudgeVerdict {
            unaware: flags[0],
            hallucination: flags[1],
            inconsistent: flags[2],
            unhelpful: flags[3],
        }
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[JudgeVerdict::default(); 3]).unwrap(), 1.0);
        let mut four = vec![JudgeVerdict::default(); 4];
        four[2] = v([false, true, false, false]);
        assert_eq!(accuracy(&four).unwrap(), 0.75);
        assert_eq!(accuracy(&[v([false, false, false, true])]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn judge_output_parsing() {
        let raw = "<unaware>no</unaware><hallucination>No</hallucination><inconsistent>yes</inconsistent><unhelpful>false</unhelpful>";
        assert_eq!(
            parse_judge_verdict(raw).unwrap(),
            v([false, false, true, false])
        );
        assert!(parse_judge_verdict("<unaware>no</unaware>").is_err());
    }

    #[test]
    fn judge_via_fixture() {
        let template = "P={preference} Q={question} R={response}";
        let prompt = "P=vegan Q=dinner? R=steak";
        let mut map = std::collections::HashMap::new();
        map.insert(
            MockLm::fixture_key(prompt),
            "<unaware>yes</unaware><hallucination>no</hallucination><inconsistent>yes</inconsistent><unhelpful>no</unhelpful>".to_string(),
        );
        let lm = MockLm::new(MockScript::FixtureReplay(map));
        let verdict = judge(&lm, template, "vegan", "dinner?", "steak").unwrap();
        assert!(!verdict.is_clean());
    }

    fn entries(n: usize) -> Vec<MemoryEntry<f32>> {
        (0..n)
            .map(|i| MemoryEntry {
                entry_id: i as u64,
                chunk: Chunk::new("c", "t"),
                instruction: Instruction {
                    text: "i".into(),
                    chunk_id: "c".into(),
                    preference_id: "p".into(),
                },
                preference_id: "p".into(),
                instr_embedding: Vector::new(vec![1.0]),
                confidence: None,
            })
            .collect()
    }

    #[test]
    fn precision_cases() {
        let es = entries(5);
        let result = RetrievalResult {
            entries: es.iter().map(|e| (e, 1.0f32)).collect(),
            steered: false,
            selected_preference: None,
            timings: StageTimings::default(),
        };
        let all: HashSet<u64> = (0..5).collect();
        assert_eq!(preference_precision_at_k(&result, &all), 1.0);
        assert_eq!(preference_precision_at_k(&result, &HashSet::new()), 0.0);
        let three: HashSet<u64> = [0, 2, 4].into_iter().collect();
        assert!((preference_precision_at_k(&result, &three) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn labels() {
        let l: Vec<_> = AblationConfig::ladder().iter().map(|c| c.label()).collect();
        assert_eq!(l, ["raw", "C", "C+F", "C+F+S"]);
    }

    #[test]
    fn raw_config_stores_everything_and_is_repeatable() {
        let e = MockEncoder::new(0, 64);
        let lm = MockLm::new(MockScript::keyword_overlap());
        let profile = PreferenceProfile::<f32>::from_texts(&["tea ceremonies"], &e).unwrap();
        let corpus: Vec<_> = (0..12)
            .map(|i| Chunk::new(format!("c{i}"), format!("item {i} tea")))
            .collect();
        let queries = vec![AblationQuery {
            text: "tea".into(),
            relevant_chunks: ["c1".to_string()].into(),
        }];
        let cfgs = [
            AblationConfig::new(false, false, false),
            AblationConfig::new(true, true, true),
        ];
        let rows = run_ablation(&corpus, &profile, &queries, &cfgs, &e, &lm).unwrap();
        let mut baseline = MemoryStore::<f32>::new(64);
        for c in &corpus {
            let v = crate::embedding::encode(&c.text, &e).unwrap();
            baseline
                .insert(
                    c.clone(),
                    Instruction {
                        text: c.text.clone(),
                        chunk_id: c.id.clone(),
                        preference_id: String::new(),
                    },
                    v,
                    None,
                )
                .unwrap();
        }
        assert_eq!(rows[0].footprint_bytes, baseline.memory_footprint());
        assert_eq!(rows[0].store_entries, 12);
        let again = run_ablation(&corpus, &profile, &queries, &cfgs, &e, &lm).unwrap();
        for (a, b) in rows.iter().zip(&again) {
            assert_eq!(
                (a.precision_at_k, a.footprint_bytes),
                (b.precision_at_k, b.footprint_bytes)
            );
        }
        let csv = rows_to_csv(&rows);
        assert!(csv.starts_with(ABLATION_CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
        assert!(matches!(
            run_ablation(&corpus, &profile, &queries, &[], &e, &lm),
            Err(Error::EmptyInput)
        ));
    }
}
