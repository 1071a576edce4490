use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use prefmem::chunk::{chunk_text, read_jsonl, write_jsonl, Chunk};
use prefmem::eval::{rows_to_csv, run_ablation, AblationConfig, AblationQuery};
use prefmem::gateway::{
    Completion, DecodeConfig, EncoderBackend, HttpEncoder, HttpLm, LmBackend, MockEncoder, MockLm,
    MockScript,
};
use prefmem::retrieval::retrieve;
use prefmem::streaming::{Scenario, StreamStats};
use prefmem::synthetic::{PlantedCorpus, PlantedCorpusConfig, ScenarioConfig};
use prefmem::{MemoryStore, PipelineConfig, PreferenceProfile, Session};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

const EXCERPT_CHARS: usize = 160;

/// Stands in for the LM when no endpoint is configured and no stage needs one.
struct NoLm;

impl LmBackend for NoLm {
    fn fingerprint(&self) -> &str {
        "none"
    }

    fn decode_config(&self) -> DecodeConfig {
        DecodeConfig::default()
    }

    fn complete(&self, _: &str) -> prefmem::Result<Completion> {
        Err(prefmem::Error::BackendUnavailable(
            "no LM endpoint configured".into(),
        ))
    }
}

pub struct Backends {
    pub encoder: Box<dyn EncoderBackend>,
    pub lm: Box<dyn LmBackend>,
}

impl Backends {
    /// `script` replaces the default keyword-overlap behavior in mock mode.
    pub fn build(cfg: &RunConfig, needs_lm: bool, script: Option<MockScript>) -> Result<Self> {
        if cfg.mock {
            return Ok(Self {
                encoder: Box::new(MockEncoder::new(cfg.seed, cfg.dim)),
                lm: Box::new(MockLm::new(
                    script.unwrap_or_else(MockScript::keyword_overlap),
                )),
            });
        }
        let encoder = Box::new(HttpEncoder::new(cfg.embed_http()?, cfg.dim)?);
        let lm: Box<dyn LmBackend> = match cfg.lm_http()? {
            Some(http) => Box::new(HttpLm::new(http, cfg.decode())?),
            None if needs_lm => {
                return Err(CliError::Config(
                    "no LM endpoint: pass --lm-url, set EPIC_LM_URL, use --no-fine or --mock"
                        .into(),
                ))
            }
            None => Box::new(NoLm),
        };
        Ok(Self { encoder, lm })
    }
}

fn pipeline(cfg: &RunConfig) -> PipelineConfig {
    PipelineConfig {
        tau: cfg.tau,
        coarse: cfg.coarse,
        fine: cfg.fine,
        max_in_flight: cfg.max_in_flight,
    }
}

fn load_profile(path: &Path, encoder: &dyn EncoderBackend) -> Result<PreferenceProfile<f32>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read profile {}: {e}", path.display())))?;
    PreferenceProfile::from_json(&text, encoder)
        .map_err(|e| CliError::from(e).context(format!("profile {}", path.display())))
}

fn optional_profile(
    cfg: &RunConfig,
    encoder: &dyn EncoderBackend,
) -> Result<PreferenceProfile<f32>> {
    match &cfg.profile {
        Some(path) => load_profile(path, encoder),
        None => Ok(PreferenceProfile::new(encoder)),
    }
}

fn load_store(path: &Path) -> Result<MemoryStore<f32>> {
    MemoryStore::load(path)
        .map_err(|e| CliError::from(e).context(format!("store {}", path.display())))
}

fn read_chunks(path: &Path) -> Result<Vec<Chunk>> {
    let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    read_jsonl(BufReader::new(file)).map_err(|e| CliError::from(e).context(path.display()))
}

fn counts_json(stats: &StreamStats) -> Value {
    let c = &stats.counts;
    json!({
        "items_seen": c.items_seen,
        "coarse_retained": c.coarse_retained,
        "fine_kept": c.fine_kept,
        "instructions_created": c.instructions_created,
        "dm_calls": c.dm_calls,
        "ig_calls": c.ig_calls,
        "lm_requests": c.lm_requests,
        "errors": c.errors,
    })
}

fn latency_json(stats: &StreamStats) -> Value {
    json!({
        "coarse_ms": stats.latency.coarse_ms,
        "fine_ms": stats.latency.fine_ms,
        "index_ms": stats.latency.index_ms,
    })
}

pub fn index(cfg: &RunConfig, chunks_path: &Path) -> Result<Value> {
    let store_path = cfg.store_path()?;
    let backends = Backends::build(cfg, cfg.fine, None)?;
    let encoder = backends.encoder.as_ref();
    let profile = match &cfg.profile {
        Some(path) => load_profile(path, encoder)?,
        None if cfg.coarse || cfg.fine => {
            return Err(CliError::Config(
                "indexing needs a preference profile (--profile)".into(),
            ))
        }
        None => PreferenceProfile::new(encoder),
    };
    let chunks = read_chunks(chunks_path)?;
    let store = if store_path.exists() {
        load_store(store_path)?
    } else {
        MemoryStore::new(encoder.dim())
    };
    let mut session = Session::new(profile, store, encoder, backends.lm.as_ref(), pipeline(cfg))?;
    let stats = session.ingest_batch(&chunks)?;
    session.store.save(store_path)?;
    tracing::info!(
        chunks = chunks.len(),
        entries = session.store.len(),
        "index updated"
    );
    Ok(json!({
        "counts": counts_json(&stats),
        "store_entries": session.store.len(),
        "footprint_bytes": session.store.memory_footprint(),
        "timings_ms": latency_json(&stats),
    }))
}

pub fn query(cfg: &RunConfig, text: &str) -> Result<Value> {
    let store = load_store(cfg.store_path()?)?;
    if store.is_empty() {
        return Ok(json!({ "query": text, "results": [], "message": "no results" }));
    }
    let backends = Backends::build(cfg, false, None)?;
    let encoder = backends.encoder.as_ref();
    let profile = optional_profile(cfg, encoder)?;
    if cfg.steering && profile.is_empty() {
        tracing::warn!("no preferences loaded; query will not be steered");
    }
    let result = retrieve(text, &profile, &store, cfg.k, cfg.steering, encoder)?;
    let results: Vec<Value> = result
        .entries
        .iter()
        .enumerate()
        .map(|(rank, (e, score))| {
            json!({
                "rank": rank + 1,
                "entry_id": e.entry_id,
                "score": score,
                "instruction": e.instruction.text,
                "chunk_id": e.chunk.id,
                "excerpt": e.chunk.text.chars().take(EXCERPT_CHARS).collect::<String>(),
                "preference_id": e.preference_id,
            })
        })
        .collect();
    let t = &result.timings;
    Ok(json!({
        "query": text,
        "k": cfg.k,
        "steered": result.steered,
        "selected_preference": result.selected_preference,
        "results": results,
        "timings_us": {
            "embed": t.embed_us,
            "steer": t.steer_us,
            "search": t.search_us,
            "total": t.total_us(),
        },
    }))
}

pub fn stream(
    cfg: &RunConfig,
    scenario_path: &Path,
    csv: Option<&Path>,
    timings: bool,
) -> Result<Value> {
    let scenario = Scenario::load(scenario_path)
        .map_err(|e| CliError::from(e).context(scenario_path.display()))?;
    let backends = Backends::build(cfg, cfg.fine, None)?;
    let encoder = backends.encoder.as_ref();
    let profile = optional_profile(cfg, encoder)?;
    let store = MemoryStore::new(encoder.dim());
    let mut session = Session::new(profile, store, encoder, backends.lm.as_ref(), pipeline(cfg))?;
    let report = session.run_scenario(&scenario)?;
    if let Some(path) = csv {
        std::fs::write(path, report.to_csv())?;
    }
    if let Some(path) = &cfg.store {
        session.store.save(path)?;
    }
    let mut out = json!({
        "seed": scenario.seed,
        "counts": counts_json(&report.stats),
        "lm_calls_per_item": report.stats.lm_calls_per_item(),
        "store_entries": session.store.len(),
        "footprint_bytes": session.store.memory_footprint(),
        "active_preferences": session.profile.len(),
        "checkpoints": report.checkpoints,
        "drift_applied": report.drift_applied,
    });
    if timings {
        out["latency_ms"] = latency_json(&report.stats);
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    /// Defaults to raw, C, C+F, C+F+S.
    #[serde(default)]
    configs: Vec<AblationConfig>,
    /// When present every config is run once per threshold.
    #[serde(default)]
    taus: Vec<f64>,
    #[serde(default)]
    planted: Option<PlantedCorpusConfig>,
    #[serde(default)]
    chunks: Option<PathBuf>,
    #[serde(default)]
    queries: Option<PathBuf>,
}

fn read_queries(path: &Path) -> Result<Vec<AblationQuery>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Config(format!("{} line {}: {e}", path.display(), n + 1)))
        })
        .collect()
}

pub fn ablate(cfg: &RunConfig, sweep_path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(sweep_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", sweep_path.display())))?;
    let sweep: SweepFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", sweep_path.display())))?;
    let base = sweep_path.parent().unwrap_or(Path::new("."));
    let mut configs = if sweep.configs.is_empty() {
        AblationConfig::ladder()
            .into_iter()
            .map(|c| AblationConfig {
                tau: cfg.tau,
                k: cfg.k,
                ..c
            })
            .collect()
    } else {
        sweep.configs
    };
    if !sweep.taus.is_empty() {
        configs = sweep
            .taus
            .iter()
            .flat_map(|&tau| configs.iter().map(move |c| c.with_tau(tau)))
            .collect();
    }
    for c in &configs {
        if !(-1.0..=1.0).contains(&c.tau) || c.k == 0 {
            return Err(CliError::Config(format!("invalid sweep entry {c:?}")));
        }
    }

    let rows = match (sweep.planted, sweep.chunks, sweep.queries) {
        (Some(planted), None, None) => {
            let corpus = PlantedCorpus::generate(&planted);
            let backends = Backends::build(cfg, true, Some(corpus.vocabulary.keyword_script()))?;
            let encoder = backends.encoder.as_ref();
            let profile = PreferenceProfile::<f32>::from_texts(
                &corpus.vocabulary.preference_texts(),
                encoder,
            )?;
            let queries: Vec<AblationQuery> = corpus
                .queries
                .iter()
                .map(|q| AblationQuery {
                    text: q.text.clone(),
                    relevant_chunks: corpus
                        .relevant_to(q.preference)
                        .into_iter()
                        .collect::<HashSet<_>>(),
                })
                .collect();
            run_ablation(
                &corpus.chunks,
                &profile,
                &queries,
                &configs,
                encoder,
                backends.lm.as_ref(),
            )?
        }
        (None, Some(chunks), Some(queries)) => {
            let chunks = read_chunks(&base.join(chunks))?;
            let queries = read_queries(&base.join(queries))?;
            let backends = Backends::build(cfg, true, None)?;
            let encoder = backends.encoder.as_ref();
            let path = cfg.profile.as_deref().ok_or_else(|| {
                CliError::Config("ablation over a chunk file needs --profile".into())
            })?;
            let profile = load_profile(path, encoder)?;
            run_ablation(
                &chunks,
                &profile,
                &queries,
                &configs,
                encoder,
                backends.lm.as_ref(),
            )?
        }
        _ => {
            return Err(CliError::Config(
                "sweep file needs either `planted` or both `chunks` and `queries`".into(),
            ))
        }
    };
    Ok(rows_to_csv(&rows))
}

pub fn stats(cfg: &RunConfig) -> Result<Value> {
    let store = load_store(cfg.store_path()?)?;
    Ok(json!({
        "entries": store.len(),
        "dim": store.dim(),
        "footprint_bytes": store.memory_footprint(),
        "embedding_bytes": store.embedding_bytes(),
        "preferences": store.preference_histogram(),
    }))
}

pub fn chunk(
    input: &Path,
    doc_id: Option<&str>,
    max_words: usize,
    out: &mut dyn Write,
) -> Result<usize> {
    if max_words == 0 {
        return Err(CliError::Config("--max-words must be at least 1".into()));
    }
    let text = std::fs::read_to_string(input)
        .map_err(|e| CliError::Io(format!("{}: {e}", input.display())))?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("doc");
    let source = input.to_string_lossy();
    let chunks = chunk_text(doc_id.unwrap_or(stem), &text, max_words, Some(&source));
    write_jsonl(out, &chunks)?;
    Ok(chunks.len())
}

pub fn synth_corpus(
    cfg: &RunConfig,
    dir: &Path,
    chunks: usize,
    preferences: usize,
) -> Result<Value> {
    let corpus = PlantedCorpus::generate(&PlantedCorpusConfig {
        seed: cfg.seed,
        chunks,
        preferences,
        ..Default::default()
    });
    std::fs::create_dir_all(dir)?;
    let enc = MockEncoder::new(cfg.seed, cfg.dim);
    let profile =
        PreferenceProfile::<f32>::from_texts(&corpus.vocabulary.preference_texts(), &enc)?;
    profile.save(&dir.join("profile.json"))?;
    write_jsonl(File::create(dir.join("chunks.jsonl"))?, &corpus.chunks)?;
    let mut q = File::create(dir.join("queries.jsonl"))?;
    for query in &corpus.queries {
        let relevant: Vec<String> = corpus.relevant_to(query.preference).into_iter().collect();
        serde_json::to_writer(
            &mut q,
            &json!({ "text": query.text, "relevant_chunks": relevant }),
        )?;
        q.write_all(b"\n")?;
    }
    Ok(json!({
        "dir": dir,
        "chunks": corpus.chunks.len(),
        "preferences": profile.len(),
        "queries": corpus.queries.len(),
    }))
}

pub fn synth_scenario(
    cfg: &RunConfig,
    out: &Path,
    batches: usize,
    batch_size: usize,
) -> Result<Value> {
    let (scenario, _) = ScenarioConfig {
        seed: cfg.seed,
        batches,
        batch_size,
        ..Default::default()
    }
    .generate();
    std::fs::write(out, scenario.to_json()?)?;
    Ok(json!({
        "path": out,
        "items": scenario.chunk_count(),
        "events": scenario.events.len(),
    }))
}

pub fn elapsed_ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}
