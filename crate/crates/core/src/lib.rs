//! Preference-aligned retrieval memory.
//!
//! A stream of text chunks is pruned against a user's preference set in
//! embedding space, verified by a language model that also writes one usage
//! instruction per (chunk, preference) pair, and indexed by instruction
//! embedding. Queries are steered toward the closest preference before an
//! exact inner-product top-k search.
//!
//! Numeric types are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the `f32` layout used by the on-disk store.

pub mod chunk;
pub mod coarse;
pub mod embedding;
mod error;
pub mod eval;
pub mod fine;
pub mod gateway;
pub mod memory;
pub mod profile;
pub mod retrieval;
mod scalar;
pub mod streaming;
pub mod synthetic;

pub use chunk::Chunk;
pub use coarse::{coarse_filter, relevant_preferences, CoarseMatch};
pub use embedding::{cosine_sim, encode, normalize, Vector};
pub use error::{Error, Result};
pub use fine::{Decision, DecisionRecord, FineVerifier, Instruction, PromptTemplates};
pub use memory::{MemoryEntry, MemoryStore};
pub use profile::{Preference, PreferenceProfile};
pub use retrieval::{retrieve, select_top_preference, steer, RetrievalResult};
pub use scalar::Scalar;
pub use streaming::{BatchTrace, DriftKind, PipelineConfig, Scenario, Session, StreamStats};

pub type Vector32 = Vector<f32>;
pub type Vector64 = Vector<f64>;
pub type Profile32 = PreferenceProfile<f32>;
pub type Profile64 = PreferenceProfile<f64>;
pub type Store32 = MemoryStore<f32>;
pub type Store64 = MemoryStore<f64>;
pub type Session32<'b> = Session<'b, f32>;
