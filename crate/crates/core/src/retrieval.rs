//! Stage 3: preference-guided query steering and top-k retrieval.

use std::time::Instant;

use serde::Serialize;

use crate::embedding::{check_dim, cosine_sim, encode, normalize, Vector};
use crate::gateway::EncoderBackend;
use crate::memory::{MemoryEntry, MemoryStore};
use crate::profile::PreferenceProfile;
use crate::{Error, Result, Scalar};

pub const DEFAULT_K: usize = 5;

/// Wall-clock time per retrieval stage, in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub embed_us: f64,
    pub steer_us: f64,
    pub search_us: f64,
}

impl StageTimings {
    pub fn total_us(&self) -> f64 {
        self.embed_us + self.steer_us + self.search_us
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalResult<'s, T: Scalar = f32> {
    pub entries: Vec<(&'s MemoryEntry<T>, T)>,
    pub steered: bool,
    pub selected_preference: Option<String>,
    pub timings: StageTimings,
}

impl<T: Scalar> RetrievalResult<'_, T> {
    pub fn entry_ids(&self) -> Vec<u64> {
        self.entries.iter().map(|(e, _)| e.entry_id).collect()
    }
}

/// The preference closest to `q`; the earliest inserted wins ties.
pub fn select_top_preference<T: Scalar>(
    q: &Vector<T>,
    profile: &PreferenceProfile<T>,
) -> Result<(String, T)> {
    let mut best: Option<(&str, T)> = None;
    for p in profile {
        let s = cosine_sim(q, &p.embedding)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((&p.id, s));
        }
    }
    best.map(|(id, s)| (id.to_string(), s))
        .ok_or(Error::EmptyProfile)
}

/// Normalized sum of query and preference. When the sum vanishes
/// (`q == -p`) the query is returned unchanged.
pub fn steer<T: Scalar>(q: &Vector<T>, p: &Vector<T>) -> Result<Vector<T>> {
    check_dim(q.dim(), p.dim())?;
    let sum = Vector::new(
        q.values()
            .iter()
            .zip(p.values())
            .map(|(&a, &b)| a + b)
            .collect(),
    );
    match normalize(&sum) {
        Ok(v) => Ok(v),
        Err(Error::ZeroVector) => Ok(q.clone()),
        Err(e) => Err(e),
    }
}

fn micros(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e6
}

/// Retrieval from an already-embedded query.
pub fn retrieve_embedded<'s, T: Scalar>(
    query: &Vector<T>,
    profile: &PreferenceProfile<T>,
    store: &'s MemoryStore<T>,
    k: usize,
    steering: bool,
) -> Result<RetrievalResult<'s, T>> {
    check_dim(store.dim(), query.dim())?;
    let mut timings = StageTimings::default();
    let t = Instant::now();
    let (query, selected) = if steering && !profile.is_empty() {
        check_dim(store.dim(), profile.dim())?;
        let (id, _) = select_top_preference(query, profile)?;
        let pref = profile.get(&id).expect("selected id is in the profile");
        (steer(query, &pref.embedding)?, Some(id))
    } else {
        (query.clone(), None)
    };
    timings.steer_us = micros(t);
    let t = Instant::now();
    let entries = store.search_entries(&query, k)?;
    timings.search_us = micros(t);
    Ok(RetrievalResult {
        entries,
        steered: selected.is_some(),
        selected_preference: selected,
        timings,
    })
}

/// Embeds `query_text`, optionally steers it toward the closest preference,
/// and returns the top `k` memory entries.
pub fn retrieve<'s, T: Scalar>(
    query_text: &str,
    profile: &PreferenceProfile<T>,
    store: &'s MemoryStore<T>,
    k: usize,
    steering: bool,
    encoder: &dyn EncoderBackend,
) -> Result<RetrievalResult<'s, T>> {
    if k == 0 {
        return Err(Error::Precondition("k must be at least 1".into()));
    }
    check_dim(store.dim(), encoder.dim())?;
    let t = Instant::now();
    let q = encode::<T>(query_text, encoder)?;
    let embed_us = micros(t);
    let mut result = retrieve_embedded(&q, profile, store, k, steering)?;
    result.timings.embed_us = embed_us;
    Ok(result)
}
