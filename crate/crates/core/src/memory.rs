//! Instruction-indexed memory: exact inner-product top-k search, eviction by
//! preference, and the binary store file.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "EPICMEM1"
//! version  u32      1
//! dim      u32
//! count    u64
//! matrix   count * dim f32, row-major, one row per entry
//! metadata count JSON lines {entry_id, chunk, instruction, preference_id, confidence?}
//! ```

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chunk::Chunk;
use crate::embedding::{check_dim, dot_slices, Vector};
use crate::fine::Instruction;
use crate::{Error, Result, Scalar};

pub const MAGIC: &[u8; 8] = b"EPICMEM1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 8 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry<T: Scalar = f32> {
    pub entry_id: u64,
    pub chunk: Chunk,
    pub instruction: Instruction,
    pub preference_id: String,
    pub instr_embedding: Vector<T>,
    pub confidence: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    entry_id: u64,
    chunk: Chunk,
    instruction: String,
    preference_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
}

impl EntryMeta {
    fn of<T: Scalar>(e: &MemoryEntry<T>) -> Self {
        Self {
            entry_id: e.entry_id,
            chunk: e.chunk.clone(),
            instruction: e.instruction.text.clone(),
            preference_id: e.preference_id.clone(),
            confidence: e.confidence,
        }
    }

    fn line(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec(self).expect("entry metadata serializes");
        v.push(b'\n');
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore<T: Scalar = f32> {
    dim: usize,
    entries: Vec<MemoryEntry<T>>,
    meta_bytes: Vec<usize>,
    next_id: u64,
}

/// Orders by descending score, then ascending entry id.
fn rank<T: Scalar>(a: &(u64, T), b: &(u64, T)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

impl<T: Scalar> MemoryStore<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
            meta_bytes: Vec::new(),
            next_id: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry<T>] {
        &self.entries
    }

    pub fn get(&self, entry_id: u64) -> Option<&MemoryEntry<T>> {
        self.entries
            .binary_search_by_key(&entry_id, |e| e.entry_id)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn insert(
        &mut self,
        chunk: Chunk,
        instruction: Instruction,
        instr_embedding: Vector<T>,
        confidence: Option<f64>,
    ) -> Result<u64> {
        check_dim(self.dim, instr_embedding.dim())?;
        if instruction.text.trim().is_empty() {
            return Err(Error::Precondition("instruction text is empty".into()));
        }
        if !instr_embedding.is_unit() {
            return Err(Error::Precondition(
                "instruction embedding is not unit norm".into(),
            ));
        }
        let entry = MemoryEntry {
            entry_id: self.next_id,
            chunk,
            preference_id: instruction.preference_id.clone(),
            instruction,
            instr_embedding,
            confidence,
        };
        self.meta_bytes.push(EntryMeta::of(&entry).line().len());
        self.entries.push(entry);
        self.next_id += 1;
        Ok(self.next_id - 1)
    }

    /// The `min(k, len)` entries with the largest inner product with `query`,
    /// best first; equal scores rank the older entry first.
    pub fn search(&self, query: &Vector<T>, k: usize) -> Result<Vec<(u64, T)>> {
        check_dim(self.dim, query.dim())?;
        if k == 0 {
            return Err(Error::Precondition("k must be at least 1".into()));
        }
        if !query.is_unit() {
            return Err(Error::Precondition("query is not unit norm".into()));
        }
        let q = query.values();
        let mut scored: Vec<(u64, T)> = self
            .entries
            .iter()
            .map(|e| (e.entry_id, dot_slices(q, e.instr_embedding.values())))
            .collect();
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank);
        Ok(scored)
    }

    pub fn search_entries(&self, query: &Vector<T>, k: usize) -> Result<Vec<(&MemoryEntry<T>, T)>> {
        Ok(self
            .search(query, k)?
            .into_iter()
            .map(|(id, s)| (self.get(id).expect("search returns stored ids"), s))
            .collect())
    }

    /// Drops every entry indexed under `preference_id`; returns how many.
    pub fn evict_by_preference(&mut self, preference_id: &str) -> usize {
        let before = self.entries.len();
        let entries = std::mem::take(&mut self.entries);
        let sizes = std::mem::take(&mut self.meta_bytes);
        for (e, size) in entries.into_iter().zip(sizes) {
            if e.preference_id != preference_id {
                self.entries.push(e);
                self.meta_bytes.push(size);
            }
        }
        before - self.entries.len()
    }

    /// Entry counts per preference id.
    pub fn preference_histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for e in &self.entries {
            *h.entry(e.preference_id.clone()).or_insert(0) += 1;
        }
        h
    }

    /// Serialized size of the full store: header, embedding matrix, and
    /// metadata lines.
    pub fn memory_footprint(&self) -> usize {
        HEADER_BYTES
            + self.entries.len() * self.dim * T::BYTES
            + self.meta_bytes.iter().sum::<usize>()
    }

    /// Bytes of the embedding matrix alone.
    pub fn embedding_bytes(&self) -> usize {
        self.entries.len() * self.dim * T::BYTES
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptFile(msg.into())
}

impl MemoryStore<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.memory_footprint());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            for v in e.instr_embedding.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for e in &self.entries {
            out.extend_from_slice(&EntryMeta::of(e).line());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(corrupt("truncated header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        if dim == 0 {
            return Err(corrupt("zero dimension"));
        }
        let matrix_len = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(dim))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt("entry count overflows"))?;
        let matrix_end = HEADER_BYTES
            .checked_add(matrix_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("truncated embedding matrix"))?;
        let count = count as usize;
        let matrix = &bytes[HEADER_BYTES..matrix_end];
        let meta = &bytes[matrix_end..];
        if count > 0 && meta.last() != Some(&b'\n') {
            return Err(corrupt("truncated metadata"));
        }
        if count == 0 && !meta.is_empty() {
            return Err(corrupt("trailing bytes after empty store"));
        }
        let lines: Vec<&[u8]> = if count == 0 {
            Vec::new()
        } else {
            meta[..meta.len() - 1].split(|&b| b == b'\n').collect()
        };
        if lines.len() != count {
            return Err(corrupt(format!(
                "header declares {count} entries, metadata has {}",
                lines.len()
            )));
        }
        let mut store = MemoryStore::new(dim);
        for (i, line) in lines.into_iter().enumerate() {
            let m: EntryMeta = serde_json::from_slice(line)
                .map_err(|e| corrupt(format!("metadata line {}: {e}", i + 1)))?;
            if store
                .entries
                .last()
                .is_some_and(|prev| prev.entry_id >= m.entry_id)
            {
                return Err(corrupt("entry ids not strictly increasing"));
            }
            let row = &matrix[i * dim * 4..(i + 1) * dim * 4];
            let values = row
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            store.meta_bytes.push(line.len() + 1);
            store.next_id = m.entry_id + 1;
            store.entries.push(MemoryEntry {
                entry_id: m.entry_id,
                instruction: Instruction {
                    text: m.instruction,
                    chunk_id: m.chunk.id.clone(),
                    preference_id: m.preference_id.clone(),
                },
                chunk: m.chunk,
                preference_id: m.preference_id,
                instr_embedding: Vector::new(values),
                confidence: m.confidence,
            });
        }
        Ok(store)
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::normalize;
    use proptest::prelude::*;

    fn unit(values: &[f32]) -> Vector<f32> {
        normalize(&Vector::new(values.to_vec())).unwrap()
    }

    fn instr(pref: &str, text: &str) -> Instruction {
        Instruction {
            text: text.into(),
            chunk_id: "c".into(),
            preference_id: pref.into(),
        }
    }

    fn put(store: &mut MemoryStore<f32>, pref: &str, v: &[f32]) -> u64 {
        store
            .insert(
                Chunk::new("c", "chunk text"),
                instr(pref, "focus"),
                unit(v),
                None,
            )
            .unwrap()
    }

    #[test]
    fn ids_start_at_zero_and_increase() {
        let mut s = MemoryStore::new(2);
        assert_eq!(put(&mut s, "p", &[1.0, 0.0]), 0);
        assert_eq!(put(&mut s, "p", &[0.0, 1.0]), 1);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn insert_wrong_dim() {
        let mut s = MemoryStore::<f32>::new(3);
        let r = s.insert(
            Chunk::new("c", "t"),
            instr("p", "i"),
            unit(&[1.0, 0.0]),
            None,
        );
        assert!(matches!(
            r,
            Err(Error::DimMismatch {
                expected: 3,
                actual: 2
            })
        ));
    }

    #[test]
    fn search_exact_match_and_large_k() {
        let mut s = MemoryStore::new(2);
        put(&mut s, "p", &[0.6, 0.8]);
        assert_eq!(s.search(&unit(&[0.6, 0.8]), 5).unwrap(), vec![(0, 1.0)]);
        put(&mut s, "p", &[1.0, 0.0]);
        put(&mut s, "p", &[0.0, 1.0]);
        assert_eq!(s.search(&unit(&[1.0, 0.0]), 10).unwrap().len(), 3);
    }

    #[test]
    fn search_ties_prefer_lower_id() {
        let mut s = MemoryStore::new(2);
        put(&mut s, "p", &[0.0, 1.0]);
        put(&mut s, "p", &[1.0, 0.0]);
        put(&mut s, "p", &[1.0, 0.0]);
        let r = s.search(&unit(&[1.0, 0.0]), 2).unwrap();
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn empty_store_search_is_empty() {
        let s = MemoryStore::<f32>::new(2);
        assert!(s.search(&unit(&[1.0, 0.0]), 5).unwrap().is_empty());
    }

    #[test]
    fn search_preconditions() {
        let s = MemoryStore::<f32>::new(2);
        assert!(s.search(&unit(&[1.0, 0.0]), 0).is_err());
        assert!(s.search(&Vector::new(vec![2.0, 0.0]), 1).is_err());
    }

    #[test]
    fn evict_counts_and_hides() {
        let mut s = MemoryStore::new(2);
        for _ in 0..3 {
            put(&mut s, "p1", &[1.0, 0.0]);
        }
        for _ in 0..2 {
            put(&mut s, "p2", &[0.0, 1.0]);
        }
        let before = s.memory_footprint();
        assert_eq!(s.evict_by_preference("p1"), 3);
        assert_eq!(s.len(), 2);
        assert!(s.memory_footprint() < before);
        assert_eq!(s.evict_by_preference("nope"), 0);
        let hits = s.search(&unit(&[1.0, 0.0]), 5).unwrap();
        assert!(hits.iter().all(|(id, _)| *id >= 3));
        assert_eq!(s.preference_histogram().get("p2"), Some(&2));
    }

    #[test]
    fn footprint_accounting() {
        let mut s = MemoryStore::<f32>::new(768);
        assert_eq!(s.memory_footprint(), HEADER_BYTES);
        let mut v = vec![0.0f32; 768];
        v[0] = 1.0;
        put(&mut s, "p", &v);
        assert_eq!(s.embedding_bytes(), 3072);
        assert_eq!(s.memory_footprint(), s.to_bytes().len());
    }

    #[test]
    fn footprint_matches_file_length_at_scale() {
        let mut s = MemoryStore::<f32>::new(16);
        for i in 0..100 {
            let v: Vec<f32> = (0..16)
                .map(|j| ((i * 31 + j * 7) % 13) as f32 + 0.5)
                .collect();
            s.insert(
                Chunk::new(format!("c{i}"), format!("chunk number {i}")),
                instr(&format!("p{}", i % 4), &format!("instruction {i}")),
                unit(&v),
                (i % 2 == 0).then_some(0.5),
            )
            .unwrap();
        }
        let bytes = s.to_bytes();
        assert_eq!(s.memory_footprint(), bytes.len());
        let text: usize = bytes[HEADER_BYTES + 100 * 16 * 4..].len();
        assert_eq!(s.memory_footprint(), HEADER_BYTES + 100 * 16 * 4 + text);
    }

    #[test]
    fn round_trip_empty_and_populated() {
        let s = MemoryStore::<f32>::new(4);
        assert_eq!(MemoryStore::from_bytes(&s.to_bytes()).unwrap(), s);
        let mut s = MemoryStore::new(3);
        for i in 0..10 {
            put(&mut s, "p", &[1.0, i as f32 * 0.37, -0.2]);
        }
        let back = MemoryStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), s.to_bytes());
    }

    #[test]
    fn corrupt_inputs() {
        let mut s = MemoryStore::new(3);
        for i in 0..4 {
            put(&mut s, "p", &[1.0, i as f32, 0.5]);
        }
        let bytes = s.to_bytes();
        for cut in [
            0,
            10,
            HEADER_BYTES,
            HEADER_BYTES + 5,
            bytes.len() - 1,
            bytes.len() - 20,
        ] {
            assert!(
                matches!(
                    MemoryStore::from_bytes(&bytes[..cut]),
                    Err(Error::CorruptFile(_))
                ),
                "cut at {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            MemoryStore::from_bytes(&bad),
            Err(Error::CorruptFile(_))
        ));
        let mut bad = bytes.clone();
        bad[12] = 9; // dim no longer agrees with the payload
        assert!(matches!(
            MemoryStore::from_bytes(&bad),
            Err(Error::CorruptFile(_))
        ));
    }

    #[test]
    fn next_id_survives_reload() {
        let mut s = MemoryStore::new(2);
        put(&mut s, "a", &[1.0, 0.0]);
        put(&mut s, "b", &[1.0, 0.0]);
        let mut back = MemoryStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(put(&mut back, "c", &[0.0, 1.0]), 2);
    }

    proptest! {
        #[test]
        fn footprint_monotone(ops in prop::collection::vec(0u8..4, 1..40)) {
            let mut s = MemoryStore::new(4);
            for op in ops {
                let before = s.memory_footprint();
                if op < 3 {
                    put(&mut s, &format!("p{op}"), &[1.0, op as f32, 0.0, 1.0]);
                    prop_assert!(s.memory_footprint() > before);
                } else {
                    let removed = s.evict_by_preference("p1");
                    if removed > 0 {
                        prop_assert!(s.memory_footprint() < before);
                    } else {
                        prop_assert_eq!(s.memory_footprint(), before);
                    }
                }
            }
        }
    }
}
