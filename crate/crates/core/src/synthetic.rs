//! Planted-relevance corpora: text whose relevance to each preference is
//! known by construction, so retrieval quality can be scored without a judge.
//!
//! Every preference owns a few *keywords* and a couple of *generic* words.
//! Relevant chunks quote the keywords; near-miss chunks quote only the
//! generic words, which puts them close in embedding space while the
//! keyword-overlap LM (with the generic words as stopwords) rejects them.
//! Everything else is topical background noise.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunk::Chunk;
use crate::gateway::{MockScript, DEFAULT_STOPWORDS};
use crate::profile::preference_id;
use crate::streaming::{DriftKind, Scenario, ScenarioEvent};

const KEYWORDS_PER_PREFERENCE: usize = 4;
const GENERIC_PER_PREFERENCE: usize = 2;
const TOPIC_WORDS: usize = 6;
const FILLER_WORDS: usize = 400;

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    (0..syllables)
        .flat_map(|_| {
            [
                *CONSONANTS.choose(rng).unwrap() as char,
                *VOWELS.choose(rng).unwrap() as char,
            ]
        })
        .collect()
}

/// Vocabulary of distinct pseudo-words, disjoint from the stopword list.
struct Lexicon {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Lexicon {
    fn new(rng: ChaCha8Rng) -> Self {
        Self {
            rng,
            used: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn fresh(&mut self, n: usize) -> Vec<String> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let w = pseudo_word(&mut self.rng, 3);
            if self.used.insert(w.clone()) {
                out.push(w);
            }
        }
        out
    }
}

/// Words that define one synthetic preference.
#[derive(Debug, Clone)]
pub struct PlantedPreference {
    pub text: String,
    pub keywords: Vec<String>,
    pub generic: Vec<String>,
}

impl PlantedPreference {
    pub fn id(&self) -> String {
        preference_id(&self.text)
    }
}

/// Shared vocabulary for corpora and streams.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pub preferences: Vec<PlantedPreference>,
    pub topics: Vec<Vec<String>>,
    pub filler: Vec<String>,
}

impl Vocabulary {
    pub fn generate(seed: u64, preferences: usize, topics: usize) -> Self {
        let mut lex = Lexicon::new(ChaCha8Rng::seed_from_u64(seed ^ 0x0005_EED0_FA11));
        let preferences = (0..preferences)
            .map(|_| {
                let keywords = lex.fresh(KEYWORDS_PER_PREFERENCE);
                let generic = lex.fresh(GENERIC_PER_PREFERENCE);
                let text = format!(
                    "I prefer {} {} with {} {} {} {}",
                    generic[0], generic[1], keywords[0], keywords[1], keywords[2], keywords[3]
                );
                PlantedPreference {
                    text,
                    keywords,
                    generic,
                }
            })
            .collect();
        let topics = (0..topics).map(|_| lex.fresh(TOPIC_WORDS)).collect();
        let filler = lex.fresh(FILLER_WORDS);
        Self {
            preferences,
            topics,
            filler,
        }
    }

    /// Default stopwords plus every generic word, for the keyword-overlap LM.
    pub fn lm_stopwords(&self) -> Vec<String> {
        DEFAULT_STOPWORDS
            .iter()
            .map(|s| s.to_string())
            .chain(
                self.preferences
                    .iter()
                    .flat_map(|p| p.generic.iter().cloned()),
            )
            .collect()
    }

    pub fn keyword_script(&self) -> MockScript {
        MockScript::KeywordOverlap {
            stopwords: self.lm_stopwords(),
        }
    }

    pub fn preference_texts(&self) -> Vec<String> {
        self.preferences.iter().map(|p| p.text.clone()).collect()
    }

    fn filler(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
        (0..n)
            .map(|_| self.filler.choose(rng).unwrap().clone())
            .collect()
    }

    fn topic(&self, rng: &mut ChaCha8Rng, topic: usize, n: usize) -> Vec<String> {
        self.topics[topic]
            .choose_multiple(rng, n)
            .cloned()
            .collect()
    }

    /// Keyword run quoted from preference `pref`, topic words, and filler.
    pub fn relevant_text(&self, rng: &mut ChaCha8Rng, pref: usize) -> String {
        let p = &self.preferences[pref];
        let start = rng.random_range(0..=KEYWORDS_PER_PREFERENCE - 3);
        let topic = rng.random_range(0..self.topics.len());
        let mut words = self.topic(rng, topic, 2);
        words.extend(p.keywords[start..start + 3].iter().cloned());
        words.extend(self.filler(rng, 3));
        words.join(" ")
    }

    /// Quotes the generic words of `pref` but none of its keywords.
    pub fn near_miss_text(&self, rng: &mut ChaCha8Rng, pref: usize) -> String {
        let p = &self.preferences[pref];
        let topic = rng.random_range(0..self.topics.len());
        let mut words = self.topic(rng, topic, 2);
        words.push(p.generic[0].clone());
        words.push(p.generic[1].clone());
        words.push("with".to_string());
        words.extend(self.filler(rng, 3));
        words.join(" ")
    }

    pub fn noise_text(&self, rng: &mut ChaCha8Rng) -> String {
        let topic = rng.random_range(0..self.topics.len());
        let mut words = self.topic(rng, topic, 3);
        words.extend(self.filler(rng, 5));
        words.shuffle(rng);
        words.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedCorpusConfig {
    pub seed: u64,
    pub preferences: usize,
    pub topics: usize,
    pub chunks: usize,
    /// Fraction of chunks planted as relevant to some preference.
    pub relevant_rate: f64,
    /// Fraction of chunks planted as near misses.
    pub near_miss_rate: f64,
    pub queries_per_preference: usize,
}

impl Default for PlantedCorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preferences: 5,
            topics: 4,
            chunks: 1000,
            relevant_rate: 0.05,
            near_miss_rate: 0.04,
            queries_per_preference: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Planted {
    Relevant(usize),
    NearMiss(usize),
    Noise,
}

#[derive(Debug, Clone)]
pub struct PlantedQuery {
    pub text: String,
    pub preference: usize,
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub vocabulary: Vocabulary,
    pub chunks: Vec<Chunk>,
    pub labels: HashMap<String, Planted>,
    pub queries: Vec<PlantedQuery>,
}

impl PlantedCorpus {
    pub fn generate(config: &PlantedCorpusConfig) -> Self {
        let vocabulary = Vocabulary::generate(config.seed, config.preferences, config.topics);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let relevant = (config.chunks as f64 * config.relevant_rate).round() as usize;
        let near = (config.chunks as f64 * config.near_miss_rate).round() as usize;
        let mut kinds: Vec<Planted> = (0..config.chunks)
            .map(|i| {
                if i < relevant {
                    Planted::Relevant(i % config.preferences)
                } else if i < relevant + near {
                    Planted::NearMiss(i % config.preferences)
                } else {
                    Planted::Noise
                }
            })
            .collect();
        kinds.shuffle(&mut rng);
        let mut chunks = Vec::with_capacity(config.chunks);
        let mut labels = HashMap::new();
        for (i, kind) in kinds.into_iter().enumerate() {
            let text = match kind {
                Planted::Relevant(p) => vocabulary.relevant_text(&mut rng, p),
                Planted::NearMiss(p) => vocabulary.near_miss_text(&mut rng, p),
                Planted::Noise => vocabulary.noise_text(&mut rng),
            };
            let id = format!("doc-{i:05}");
            labels.insert(id.clone(), kind);
            chunks.push(Chunk::new(id, text).with_source("planted"));
        }
        let mut queries = Vec::new();
        for (p, pref) in vocabulary.preferences.iter().enumerate() {
            for _ in 0..config.queries_per_preference {
                let keyword = pref.keywords.choose(&mut rng).unwrap();
                let topic = rng.random_range(0..vocabulary.topics.len());
                let mut words = vocabulary.topic(&mut rng, topic, 3);
                words.insert(1, keyword.clone());
                queries.push(PlantedQuery {
                    text: format!("suggest {}", words.join(" ")),
                    preference: p,
                });
            }
        }
        Self {
            vocabulary,
            chunks,
            labels,
            queries,
        }
    }

    /// Ids of chunks planted as relevant to preference `pref`.
    pub fn relevant_to(&self, pref: usize) -> BTreeSet<String> {
        self.labels
            .iter()
            .filter(|(_, k)| **k == Planted::Relevant(pref))
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn count(&self, pred: impl Fn(Planted) -> bool) -> usize {
        self.labels.values().filter(|k| pred(**k)).count()
    }
}

/// Random streaming workload with `+1/-1` preference drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Size of the pool drift draws preferences from.
    pub pool: usize,
    pub initial_preferences: usize,
    pub topics: usize,
    pub batches: usize,
    pub batch_size: usize,
    pub relevant_rate: f64,
    pub near_miss_rate: f64,
    pub p_add: f64,
    pub p_remove: f64,
    pub checkpoint_every: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pool: 12,
            initial_preferences: 5,
            topics: 4,
            batches: 50,
            batch_size: 40,
            relevant_rate: 0.05,
            near_miss_rate: 0.02,
            p_add: 0.02,
            p_remove: 0.02,
            checkpoint_every: 200,
        }
    }
}

impl ScenarioConfig {
    /// Builds the scenario and the vocabulary needed to judge it. Relevant
    /// chunks target any pool preference, so additions start matching
    /// content already flowing through the stream. The last active
    /// preference is never removed.
    pub fn generate(&self) -> (Scenario, Vocabulary) {
        let vocab = Vocabulary::generate(self.seed, self.pool, self.topics);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1));
        let mut active: Vec<usize> = (0..self.initial_preferences.min(self.pool)).collect();
        let mut events = Vec::new();
        let mut next_chunk = 0usize;
        for step in 0..self.batches as u64 {
            if rng.random_bool(self.p_add) {
                let inactive: Vec<usize> = (0..self.pool).filter(|i| !active.contains(i)).collect();
                if let Some(&p) = inactive.choose(&mut rng) {
                    active.push(p);
                    events.push(ScenarioEvent::Drift {
                        step,
                        drift: DriftKind::Add(vocab.preferences[p].text.clone()),
                    });
                }
            }
            if active.len() > 1 && rng.random_bool(self.p_remove) {
                let idx = rng.random_range(0..active.len());
                let p = active.remove(idx);
                events.push(ScenarioEvent::Drift {
                    step,
                    drift: DriftKind::Remove(vocab.preferences[p].id()),
                });
            }
            let batch = (0..self.batch_size)
                .map(|_| {
                    let roll: f64 = rng.random();
                    let pref = rng.random_range(0..self.pool);
                    let text = if roll < self.relevant_rate {
                        vocab.relevant_text(&mut rng, pref)
                    } else if roll < self.relevant_rate + self.near_miss_rate {
                        vocab.near_miss_text(&mut rng, pref)
                    } else {
                        vocab.noise_text(&mut rng)
                    };
                    next_chunk += 1;
                    Chunk::new(format!("s{:06}", next_chunk - 1), text)
                })
                .collect();
            events.push(ScenarioEvent::Batch { step, batch });
        }
        let scenario = Scenario {
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            preferences: (0..self.initial_preferences.min(self.pool))
                .map(|p| vocab.preferences[p].text.clone())
                .collect(),
            events,
        };
        (scenario, vocab)
    }
}
