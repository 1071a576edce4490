//! The active preference set and its embeddings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{check_dim, encode, encode_batch, Vector};
use crate::gateway::EncoderBackend;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Preference<T: Scalar = f32> {
    pub id: String,
    pub text: String,
    pub embedding: Vector<T>,
}

/// Content-addressed identifier: the same text always yields the same id.
pub fn preference_id(text: &str) -> String {
    let digest = Sha256::digest(canonical_text(text).as_bytes());
    format!("p-{}", &hex::encode(digest)[..16])
}

/// Whitespace runs collapse to single spaces so every preference renders on
/// one prompt line.
pub fn canonical_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Ordered preference set; iteration order is insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceProfile<T: Scalar = f32> {
    preferences: Vec<Preference<T>>,
    encoder_fingerprint: String,
    dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct PreferenceDoc<T: Scalar> {
    #[serde(default)]
    id: Option<String>,
    text: String,
    #[serde(default)]
    embedding: Option<Vector<T>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ProfileDoc<T: Scalar> {
    #[serde(default)]
    encoder_fingerprint: String,
    preferences: Vec<PreferenceDoc<T>>,
}

impl<T: Scalar> PreferenceProfile<T> {
    pub fn new(encoder: &dyn EncoderBackend) -> Self {
        Self {
            preferences: Vec::new(),
            encoder_fingerprint: encoder.fingerprint().to_string(),
            dim: encoder.dim(),
        }
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S], encoder: &dyn EncoderBackend) -> Result<Self> {
        let mut profile = Self::new(encoder);
        for t in texts {
            profile.add_preference(t.as_ref(), encoder)?;
        }
        Ok(profile)
    }

    pub fn len(&self) -> usize {
        self.preferences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preferences.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encoder_fingerprint(&self) -> &str {
        &self.encoder_fingerprint
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Preference<T>> {
        self.preferences.iter()
    }

    pub fn preferences(&self) -> &[Preference<T>] {
        &self.preferences
    }

    pub fn get(&self, id: &str) -> Option<&Preference<T>> {
        self.preferences.iter().find(|p| p.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.preferences.iter().position(|p| p.id == id)
    }

    fn check_encoder(&self, encoder: &dyn EncoderBackend) -> Result<()> {
        if encoder.fingerprint() != self.encoder_fingerprint {
            return Err(Error::FingerprintMismatch {
                profile: self.encoder_fingerprint.clone(),
                backend: encoder.fingerprint().to_string(),
            });
        }
        Ok(())
    }

    pub fn add_preference(
        &mut self,
        text: &str,
        encoder: &dyn EncoderBackend,
    ) -> Result<Preference<T>> {
        let text = canonical_text(text);
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        self.check_encoder(encoder)?;
        if self.preferences.iter().any(|p| p.text == text) {
            return Err(Error::DuplicatePreference(text));
        }
        let embedding = encode(&text, encoder)?;
        check_dim(self.dim, embedding.dim())?;
        let pref = Preference {
            id: preference_id(&text),
            text,
            embedding,
        };
        self.preferences.push(pref.clone());
        Ok(pref)
    }

    pub fn remove_preference(&mut self, id: &str) -> Result<Preference<T>> {
        let idx = self
            .position(id)
            .ok_or_else(|| Error::UnknownPreference(id.to_string()))?;
        Ok(self.preferences.remove(idx))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ProfileDoc {
            encoder_fingerprint: self.encoder_fingerprint.clone(),
            preferences: self
                .preferences
                .iter()
                .map(|p| PreferenceDoc {
                    id: Some(p.id.clone()),
                    text: p.text.clone(),
                    embedding: Some(p.embedding.clone()),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses a profile document, computing missing ids and embeddings and
    /// re-encoding every preference when the document was produced by a
    /// different encoder.
    pub fn from_json(json: &str, encoder: &dyn EncoderBackend) -> Result<Self> {
        let doc: ProfileDoc<T> = serde_json::from_str(json)?;
        let stale = doc.encoder_fingerprint != encoder.fingerprint()
            || doc.preferences.iter().any(|p| p.embedding.is_none());
        let texts: Vec<String> = doc
            .preferences
            .iter()
            .map(|p| canonical_text(&p.text))
            .collect();
        if texts.iter().any(String::is_empty) {
            return Err(Error::EmptyText);
        }
        let embeddings: Vec<Vector<T>> = if stale {
            if !doc.encoder_fingerprint.is_empty()
                && doc.encoder_fingerprint != encoder.fingerprint()
            {
                tracing::info!(
                    from = %doc.encoder_fingerprint,
                    to = %encoder.fingerprint(),
                    "re-encoding preference profile"
                );
            }
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            encode_batch(&refs, encoder)?
        } else {
            doc.preferences
                .iter()
                .map(|p| p.embedding.clone().unwrap())
                .collect()
        };
        let mut profile = Self::new(encoder);
        for ((p, text), embedding) in doc.preferences.into_iter().zip(texts).zip(embeddings) {
            check_dim(profile.dim, embedding.dim())?;
            if profile.preferences.iter().any(|q| q.text == text) {
                return Err(Error::DuplicatePreference(text));
            }
            let id = p.id.unwrap_or_else(|| preference_id(&text));
            if profile.get(&id).is_some() {
                return Err(Error::DuplicatePreference(id));
            }
            profile.preferences.push(Preference {
                id,
                text,
                embedding,
            });
        }
        Ok(profile)
    }

    pub fn load(path: &Path, encoder: &dyn EncoderBackend) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, encoder)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

impl<'a, T: Scalar> IntoIterator for &'a PreferenceProfile<T> {
    type Item = &'a Preference<T>;
    type IntoIter = std::slice::Iter<'a, Preference<T>>;

    fn into_iter(self) -> Self::IntoIter {
        self.preferences.iter()
    }
}
