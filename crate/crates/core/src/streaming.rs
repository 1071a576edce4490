//! Incremental ingestion sessions, preference drift, and scenario replay.

use std::ops::AddAssign;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunk::Chunk;
use crate::coarse::{check_tau, score_chunks, CoarseMatch, CoarseOutcome, DEFAULT_TAU};
use crate::embedding::{cosine_sim, encode, encode_batch, Vector};
use crate::fine::{FineVerifier, Instruction};
use crate::gateway::{EncoderBackend, LmBackend};
use crate::memory::MemoryStore;
use crate::profile::PreferenceProfile;
use crate::{Error, Result, Scalar};

pub const DEFAULT_CHECKPOINT_EVERY: u64 = 200;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

/// Which stages run during ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tau: f64,
    pub coarse: bool,
    pub fine: bool,
    pub max_in_flight: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            coarse: true,
            fine: true,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub items_seen: u64,
    pub coarse_retained: u64,
    pub fine_kept: u64,
    pub instructions_created: u64,
    /// Decision prompts issued, one per coarse-retained chunk.
    pub dm_calls: u64,
    /// Instruction prompts issued, one per (kept chunk, refined preference).
    pub ig_calls: u64,
    /// Raw LM requests including re-asks after unparseable output.
    pub lm_requests: u64,
    /// Chunks or pairs dropped because a backend call failed.
    pub errors: u64,
}

impl AddAssign for StageCounts {
    fn add_assign(&mut self, o: Self) {
        self.items_seen += o.items_seen;
        self.coarse_retained += o.coarse_retained;
        self.fine_kept += o.fine_kept;
        self.instructions_created += o.instructions_created;
        self.dm_calls += o.dm_calls;
        self.ig_calls += o.ig_calls;
        self.lm_requests += o.lm_requests;
        self.errors += o.errors;
    }
}

/// Accumulated wall-clock time per indexing stage, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub coarse_ms: f64,
    pub fine_ms: f64,
    pub index_ms: f64,
}

impl LatencyStats {
    pub fn total_ms(&self) -> f64 {
        self.coarse_ms + self.fine_ms + self.index_ms
    }
}

impl AddAssign for LatencyStats {
    fn add_assign(&mut self, o: Self) {
        self.coarse_ms += o.coarse_ms;
        self.fine_ms += o.fine_ms;
        self.index_ms += o.index_ms;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamStats {
    pub counts: StageCounts,
    pub latency: LatencyStats,
}

impl StreamStats {
    pub fn lm_calls_per_item(&self) -> f64 {
        let c = &self.counts;
        if c.items_seen == 0 {
            return 0.0;
        }
        (c.dm_calls + c.ig_calls) as f64 / c.items_seen as f64
    }

    pub fn mean_latency_ms(&self) -> f64 {
        if self.counts.items_seen == 0 {
            return 0.0;
        }
        self.latency.total_ms() / self.counts.items_seen as f64
    }
}

impl AddAssign for StreamStats {
    fn add_assign(&mut self, o: Self) {
        self.counts += o.counts;
        self.latency += o.latency;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftKind {
    Add(String),
    Remove(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub step: u64,
    pub kind: DriftKind,
}

/// What one chunk contributes to the store after stage 2.
struct Pending<T: Scalar> {
    chunk: Chunk,
    entries: Vec<(Instruction, Vector<T>)>,
    confidence: Option<f64>,
}

#[derive(Default)]
struct ChunkOutcome<T: Scalar> {
    pending: Option<Pending<T>>,
    kept: Option<(String, Vec<String>)>,
    counts: StageCounts,
}

/// Which chunks of one batch survived each stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchTrace {
    /// Chunk id and the ids of its candidate preferences after stage 1.
    pub coarse: Vec<(String, Vec<String>)>,
    /// Chunk id and refined preference ids for every Keep decision.
    pub kept: Vec<(String, Vec<String>)>,
}

/// One ingestion context: a profile, a store, and the backends feeding them.
pub struct Session<'b, T: Scalar = f32> {
    pub profile: PreferenceProfile<T>,
    pub store: MemoryStore<T>,
    encoder: &'b dyn EncoderBackend,
    lm: &'b dyn LmBackend,
    verifier: FineVerifier,
    config: PipelineConfig,
    stats: StreamStats,
}

impl<'b, T: Scalar> Session<'b, T> {
    pub fn new(
        profile: PreferenceProfile<T>,
        store: MemoryStore<T>,
        encoder: &'b dyn EncoderBackend,
        lm: &'b dyn LmBackend,
        config: PipelineConfig,
    ) -> Result<Self> {
        check_tau(config.tau)?;
        crate::embedding::check_dim(store.dim(), encoder.dim())?;
        if !profile.is_empty() {
            crate::embedding::check_dim(store.dim(), profile.dim())?;
        }
        Ok(Self {
            profile,
            store,
            encoder,
            lm,
            verifier: FineVerifier::default(),
            config,
            stats: StreamStats::default(),
        })
    }

    pub fn with_verifier(mut self, verifier: FineVerifier) -> Self {
        self.verifier = verifier;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn stats(&self) -> &StreamStats {
        &self.stats
    }

    pub fn encoder(&self) -> &dyn EncoderBackend {
        self.encoder
    }

    /// Stage 1. With coarse filtering off every chunk passes with the whole
    /// profile as its candidate set.
    fn stage_one(&self, chunks: &[Chunk], counts: &mut StageCounts) -> Result<Vec<CoarseMatch<T>>> {
        if self.config.coarse {
            let outcomes = score_chunks(chunks, &self.profile, self.config.tau, self.encoder)?;
            let mut kept = Vec::new();
            for o in outcomes {
                match o {
                    CoarseOutcome::Retained(m) => kept.push(m),
                    CoarseOutcome::Dropped { .. } => {}
                    CoarseOutcome::Failed { chunk_id, error } => {
                        tracing::error!(chunk = %chunk_id, %error, "skipping chunk");
                        counts.errors += 1;
                    }
                }
            }
            return Ok(kept);
        }
        if self.config.fine && self.profile.is_empty() {
            return Err(Error::EmptyProfile);
        }
        let encoded: Vec<_> = chunks
            .par_iter()
            .map(|c| encode::<T>(&c.text, self.encoder))
            .collect();
        let mut kept = Vec::new();
        for (chunk, embedding) in chunks.iter().zip(encoded) {
            let embedding = match embedding {
                Ok(v) => v,
                Err(error) => {
                    tracing::error!(chunk = %chunk.id, %error, "skipping chunk");
                    counts.errors += 1;
                    continue;
                }
            };
            let mut matched = Vec::with_capacity(self.profile.len());
            for p in &self.profile {
                matched.push((p.id.clone(), cosine_sim(&embedding, &p.embedding)?));
            }
            matched.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
            kept.push(CoarseMatch {
                chunk: chunk.clone(),
                embedding,
                matched,
            });
        }
        Ok(kept)
    }

    /// Stage 2 for one match: decision, instructions, instruction embeddings.
    fn verify_one(&self, m: CoarseMatch<T>) -> ChunkOutcome<T> {
        let mut out = ChunkOutcome::default();
        out.counts.dm_calls = 1;
        let verification = match self.verifier.verify(&m, &self.profile, self.lm) {
            Ok(v) => v,
            Err(error) => {
                tracing::error!(chunk = %m.chunk.id, %error, "verification failed");
                out.counts.errors += 1;
                return out;
            }
        };
        out.counts.lm_requests += verification.attempts as u64;
        let record = verification.record;
        if !record.is_keep() {
            return out;
        }
        out.counts.fine_kept = 1;
        out.kept = Some((m.chunk.id.clone(), record.refined_preferences.clone()));
        out.counts.ig_calls = record.refined_preferences.len() as u64;
        let batch =
            match self
                .verifier
                .generate_instructions(&m.chunk, &record, &self.profile, self.lm)
            {
                Ok(b) => b,
                Err(error) => {
                    tracing::error!(chunk = %m.chunk.id, %error, "instruction generation failed");
                    out.counts.errors += 1;
                    return out;
                }
            };
        out.counts.lm_requests += batch.attempts as u64;
        out.counts.errors += batch.failures.len() as u64;
        let texts: Vec<&str> = batch.instructions.iter().map(|i| i.text.as_str()).collect();
        let embeddings = if texts.is_empty() {
            Vec::new()
        } else {
            match encode_batch::<T>(&texts, self.encoder) {
                Ok(v) => v,
                Err(error) => {
                    tracing::error!(chunk = %m.chunk.id, %error, "instruction embedding failed");
                    out.counts.errors += 1;
                    return out;
                }
            }
        };
        out.pending = Some(Pending {
            chunk: m.chunk,
            entries: batch.instructions.into_iter().zip(embeddings).collect(),
            confidence: record.confidence,
        });
        out
    }

    /// Runs a batch through the configured stages and commits the resulting
    /// entries in input order. Returns this batch's contribution to the stats.
    pub fn ingest_batch(&mut self, chunks: &[Chunk]) -> Result<StreamStats> {
        self.ingest(chunks, None)
    }

    /// Like [`Session::ingest_batch`], also reporting per-stage survivors.
    pub fn ingest_batch_traced(&mut self, chunks: &[Chunk]) -> Result<(StreamStats, BatchTrace)> {
        let mut trace = BatchTrace::default();
        let stats = self.ingest(chunks, Some(&mut trace))?;
        Ok((stats, trace))
    }

    fn ingest(
        &mut self,
        chunks: &[Chunk],
        mut trace: Option<&mut BatchTrace>,
    ) -> Result<StreamStats> {
        let mut delta = StreamStats::default();
        delta.counts.items_seen = chunks.len() as u64;
        if chunks.is_empty() {
            return Ok(delta);
        }

        let t = Instant::now();
        let retained = self.stage_one(chunks, &mut delta.counts)?;
        delta.counts.coarse_retained = retained.len() as u64;
        if let Some(tr) = trace.as_deref_mut() {
            tr.coarse = retained
                .iter()
                .map(|m| {
                    (
                        m.chunk.id.clone(),
                        m.matched.iter().map(|(id, _)| id.clone()).collect(),
                    )
                })
                .collect();
        }
        delta.latency.coarse_ms = t.elapsed().as_secs_f64() * 1e3;

        let t = Instant::now();
        let pending: Vec<Pending<T>> = if self.config.fine {
            let mut out = Vec::with_capacity(retained.len());
            let window = self.config.max_in_flight.max(1);
            let mut retained = retained.into_iter().peekable();
            while retained.peek().is_some() {
                let group: Vec<_> = retained.by_ref().take(window).collect();
                let results: Vec<ChunkOutcome<T>> =
                    group.into_par_iter().map(|m| self.verify_one(m)).collect();
                for r in results {
                    delta.counts += r.counts;
                    if let (Some(tr), Some(k)) = (trace.as_deref_mut(), r.kept) {
                        tr.kept.push(k);
                    }
                    out.extend(r.pending);
                }
            }
            out
        } else {
            retained
                .into_iter()
                .map(|m| {
                    let preference_id = if self.config.coarse {
                        m.matched[0].0.clone()
                    } else {
                        String::new()
                    };
                    Pending {
                        entries: vec![(
                            Instruction {
                                text: m.chunk.text.clone(),
                                chunk_id: m.chunk.id.clone(),
                                preference_id,
                            },
                            m.embedding,
                        )],
                        chunk: m.chunk,
                        confidence: None,
                    }
                })
                .collect()
        };
        delta.latency.fine_ms = t.elapsed().as_secs_f64() * 1e3;

        let t = Instant::now();
        for p in pending {
            for (instruction, embedding) in p.entries {
                self.store
                    .insert(p.chunk.clone(), instruction, embedding, p.confidence)?;
                delta.counts.instructions_created += 1;
            }
        }
        delta.latency.index_ms = t.elapsed().as_secs_f64() * 1e3;

        self.stats += delta;
        Ok(delta)
    }

    /// Mutates the profile; removing a preference also evicts its entries.
    /// Returns the number of evicted entries.
    pub fn apply_drift(&mut self, kind: &DriftKind) -> Result<usize> {
        match kind {
            DriftKind::Add(text) => {
                self.profile.add_preference(text, self.encoder)?;
                Ok(0)
            }
            DriftKind::Remove(id) => {
                self.profile.remove_preference(id)?;
                Ok(self.store.evict_by_preference(id))
            }
        }
    }

    /// Replays a scenario, recording a checkpoint each time the item count
    /// crosses a multiple of `checkpoint_every` and once at the end.
    pub fn run_scenario(&mut self, scenario: &Scenario) -> Result<ScenarioReport> {
        scenario.validate()?;
        for text in &scenario.preferences {
            if self
                .profile
                .iter()
                .all(|p| p.text != crate::profile::canonical_text(text))
            {
                self.profile.add_preference(text, self.encoder)?;
            }
        }
        let mut report = ScenarioReport::default();
        let every = scenario.checkpoint_every.max(1);
        let mut next_mark = every;
        for event in &scenario.events {
            match event {
                ScenarioEvent::Batch { batch, .. } => {
                    self.ingest_batch(batch)?;
                    let seen = self.stats.counts.items_seen;
                    if seen >= next_mark {
                        report.checkpoints.push(self.checkpoint());
                        while next_mark <= seen {
                            next_mark += every;
                        }
                    }
                }
                ScenarioEvent::Drift { step, drift } => {
                    let evicted = self.apply_drift(drift)?;
                    report.drift_applied.push((*step, evicted));
                }
            }
        }
        if report.checkpoints.last().map(|c| c.items_seen) != Some(self.stats.counts.items_seen)
            || report.checkpoints.is_empty()
        {
            report.checkpoints.push(self.checkpoint());
        }
        report.stats = self.stats;
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let c = &self.stats.counts;
        Checkpoint {
            items_seen: c.items_seen,
            coarse_retained: c.coarse_retained,
            fine_kept: c.fine_kept,
            instructions_created: c.instructions_created,
            store_entries: self.store.len() as u64,
            footprint_bytes: self.store.memory_footprint() as u64,
            active_preferences: self.profile.len() as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub items_seen: u64,
    pub coarse_retained: u64,
    pub fine_kept: u64,
    pub instructions_created: u64,
    pub store_entries: u64,
    pub footprint_bytes: u64,
    pub active_preferences: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub stats: StreamStats,
    pub checkpoints: Vec<Checkpoint>,
    /// `(step, entries evicted)` per drift event.
    pub drift_applied: Vec<(u64, usize)>,
}

pub const CHECKPOINT_CSV_HEADER: &str =
    "items_seen,coarse_retained,fine_kept,instructions_created,store_entries,footprint_bytes,active_preferences";

impl ScenarioReport {
    /// Footprint series as `(items seen, bytes)`.
    pub fn footprint_series(&self) -> Vec<(u64, u64)> {
        self.checkpoints
            .iter()
            .map(|c| (c.items_seen, c.footprint_bytes))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CHECKPOINT_CSV_HEADER);
        out.push('\n');
        for c in &self.checkpoints {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.items_seen,
                c.coarse_retained,
                c.fine_kept,
                c.instructions_created,
                c.store_entries,
                c.footprint_bytes,
                c.active_preferences
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioEvent {
    Batch { step: u64, batch: Vec<Chunk> },
    Drift { step: u64, drift: DriftKind },
}

impl ScenarioEvent {
    pub fn step(&self) -> u64 {
        match self {
            ScenarioEvent::Batch { step, .. } | ScenarioEvent::Drift { step, .. } => *step,
        }
    }
}

/// A replayable stream: batches and drift events in step order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Preferences active before the first event.
    #[serde(default)]
    pub preferences: Vec<String>,
    pub events: Vec<ScenarioEvent>,
}

fn default_checkpoint_every() -> u64 {
    DEFAULT_CHECKPOINT_EVERY
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidScenario(
                "checkpoint_every must be positive".into(),
            ));
        }
        let mut last = 0;
        for (i, e) in self.events.iter().enumerate() {
            if e.step() < last {
                return Err(Error::InvalidScenario(format!(
                    "event {i} has step {} after step {last}",
                    e.step()
                )));
            }
            last = e.step();
            if let ScenarioEvent::Drift {
                drift: DriftKind::Add(t),
                ..
            } = e
            {
                if t.trim().is_empty() {
                    return Err(Error::InvalidScenario(format!(
                        "event {i} adds an empty preference"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let s: Scenario =
            serde_json::from_str(json).map_err(|e| Error::InvalidScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn chunk_count(&self) -> usize {
        self.events
            .iter()
            .map(|e| match e {
                ScenarioEvent::Batch { batch, .. } => batch.len(),
                ScenarioEvent::Drift { .. } => 0,
            })
            .sum()
    }
}
