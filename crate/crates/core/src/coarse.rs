//! Stage 1: embedding-similarity pruning against the preference set.

use rayon::prelude::*;

use crate::chunk::Chunk;
use crate::embedding::{check_dim, cosine_sim, encode, Vector};
use crate::gateway::EncoderBackend;
use crate::profile::PreferenceProfile;
use crate::{Error, Result, Scalar};

pub const DEFAULT_TAU: f64 = 0.3;

/// A chunk that cleared the threshold for at least one preference.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseMatch<T: Scalar = f32> {
    pub chunk: Chunk,
    pub embedding: Vector<T>,
    /// `(preference id, similarity)`, descending by similarity.
    pub matched: Vec<(String, T)>,
}

pub fn check_tau(tau: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(Error::Precondition(format!(
            "threshold {tau} outside [-1, 1]"
        )));
    }
    Ok(())
}

/// Every preference whose similarity to `x` is at least `tau`, best first.
/// Equal scores keep profile order.
pub fn relevant_preferences<T: Scalar>(
    x: &Vector<T>,
    profile: &PreferenceProfile<T>,
    tau: f64,
) -> Result<Vec<(String, T)>> {
    check_tau(tau)?;
    check_dim(profile.dim(), x.dim())?;
    let tau = T::from_f64_lossy(tau);
    let mut out = Vec::new();
    for p in profile {
        let s = cosine_sim(x, &p.embedding)?;
        if s >= tau {
            out.push((p.id.clone(), s));
        }
    }
    // stable sort keeps insertion order among ties
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    Ok(out)
}

/// Outcome of scoring one chunk.
#[derive(Debug)]
pub enum CoarseOutcome<T: Scalar> {
    Retained(CoarseMatch<T>),
    Dropped {
        chunk_id: String,
        embedding: Vector<T>,
    },
    Failed {
        chunk_id: String,
        error: Error,
    },
}

/// Scores `chunks` in parallel and reports one outcome per chunk, in input order.
pub fn score_chunks<T: Scalar>(
    chunks: &[Chunk],
    profile: &PreferenceProfile<T>,
    tau: f64,
    encoder: &dyn EncoderBackend,
) -> Result<Vec<CoarseOutcome<T>>> {
    if profile.is_empty() {
        return Err(Error::EmptyProfile);
    }
    check_tau(tau)?;
    check_dim(profile.dim(), encoder.dim())?;
    Ok(chunks
        .par_iter()
        .map(|chunk| {
            let embedding = match encode::<T>(&chunk.text, encoder) {
                Ok(v) => v,
                Err(error) => {
                    return CoarseOutcome::Failed {
                        chunk_id: chunk.id.clone(),
                        error,
                    }
                }
            };
            match relevant_preferences(&embedding, profile, tau) {
                Ok(matched) if !matched.is_empty() => CoarseOutcome::Retained(CoarseMatch {
                    chunk: chunk.clone(),
                    embedding,
                    matched,
                }),
                Ok(_) => CoarseOutcome::Dropped {
                    chunk_id: chunk.id.clone(),
                    embedding,
                },
                Err(error) => CoarseOutcome::Failed {
                    chunk_id: chunk.id.clone(),
                    error,
                },
            }
        })
        .collect())
}

/// Keeps the chunks matching at least one preference, in input order. Chunks
/// whose encoding fails are logged and skipped.
pub fn coarse_filter<T: Scalar>(
    chunks: &[Chunk],
    profile: &PreferenceProfile<T>,
    tau: f64,
    encoder: &dyn EncoderBackend,
) -> Result<Vec<CoarseMatch<T>>> {
    Ok(score_chunks(chunks, profile, tau, encoder)?
        .into_iter()
        .filter_map(|o| match o {
            CoarseOutcome::Retained(m) => Some(m),
            CoarseOutcome::Dropped { .. } => None,
            CoarseOutcome::Failed { chunk_id, error } => {
                tracing::error!(chunk = %chunk_id, %error, "skipping chunk");
                None
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockEncoder;

    fn setup() -> (MockEncoder, PreferenceProfile<f32>) {
        let e = MockEncoder::new(0, 128);
        let p = PreferenceProfile::from_texts(
            &[
                "vegan cooking recipes",
                "mountain hiking trails",
                "electric vehicles",
                "jazz music",
                "chess openings",
            ],
            &e,
        )
        .unwrap();
        (e, p)
    }

    #[test]
    fn self_match_scores_one() {
        let (_, p) = setup();
        let x = p.preferences()[2].embedding.clone();
        let rel = relevant_preferences(&x, &p, 0.99).unwrap();
        assert_eq!(rel[0].0, p.preferences()[2].id);
        assert!((rel[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ceiling_threshold() {
        let (_, p) = setup();
        assert!(matches!(
            relevant_preferences(&p.preferences()[0].embedding, &p, 1.0 + 1e-9),
            Err(Error::Precondition(_))
        ));
        let off = crate::embedding::normalize(&Vector::<f32>::new(
            (0..128).map(|i| (i as f32).sin()).collect(),
        ))
        .unwrap();
        assert!(relevant_preferences(&off, &p, 1.0).unwrap().is_empty());
    }

    #[test]
    fn floor_threshold_keeps_everything() {
        let (e, p) = setup();
        let chunks: Vec<_> = (0..20)
            .map(|i| Chunk::new(format!("c{i}"), format!("noise token {i}")))
            .collect();
        let kept = coarse_filter(&chunks, &p, -1.0, &e).unwrap();
        assert_eq!(kept.len(), 20);
        assert!(kept.iter().all(|m| m.matched.len() == 5));
    }

    #[test]
    fn chunk_equal_to_preference_retained() {
        let e = MockEncoder::new(0, 128);
        let p = PreferenceProfile::<f32>::from_texts(&["quiet reading nooks"], &e).unwrap();
        let kept = coarse_filter(&[Chunk::new("x", "quiet reading nooks")], &p, 0.3, &e).unwrap();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn empty_profile_is_an_error() {
        let e = MockEncoder::new(0, 16);
        let p = PreferenceProfile::<f32>::new(&e);
        assert!(matches!(
            coarse_filter(&[], &p, 0.3, &e),
            Err(Error::EmptyProfile)
        ));
    }

    #[test]
    fn encoder_failure_skips_chunk() {
        let (e, p) = setup();
        let chunks = vec![
            Chunk::new("a", "vegan cooking"),
            Chunk::new("b", "   "),
            Chunk::new("c", "jazz music"),
        ];
        let kept = coarse_filter(&chunks, &p, 0.3, &e).unwrap();
        let ids: Vec<_> = kept.iter().map(|m| m.chunk.id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);
    }

    #[test]
    fn ties_follow_profile_order() {
        let e = MockEncoder::new(0, 16);
        let x: Vector = encode("first", &e).unwrap();
        let p = PreferenceProfile::<f32>::from_json(
            &format!(
                r#"{{"encoder_fingerprint":"{}","preferences":[{{"id":"a","text":"one","embedding":{e1}}},{{"id":"b","text":"two","embedding":{e1}}}]}}"#,
                e.fingerprint(),
                e1 = serde_json::to_string(&x).unwrap()
            ),
            &e,
        )
        .unwrap();
        let rel = relevant_preferences(&x, &p, 0.5).unwrap();
        let ids: Vec<_> = rel.iter().map(|r| r.0.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
    }
}
