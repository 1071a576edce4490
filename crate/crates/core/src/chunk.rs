//! Candidate text chunks, the word-budget chunker, and JSON Lines I/O.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_CHUNK_WORDS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl Chunk {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            source: None,
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }
}

fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let boundary = chars.peek().is_none_or(|(_, n)| n.is_whitespace());
            if boundary {
                let end = i + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Packs whole sentences into chunks of about `max_words` words. A sentence
/// longer than the budget becomes a chunk on its own and is never split.
pub fn chunk_text(doc_id: &str, text: &str, max_words: usize, source: Option<&str>) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut words = 0;
    let mut flush = |current: &mut Vec<&str>, words: &mut usize| {
        if current.is_empty() {
            return;
        }
        let mut c = Chunk::new(format!("{doc_id}-{}", chunks.len()), current.join(" "));
        c.source = source.map(str::to_string);
        chunks.push(c);
        current.clear();
        *words = 0;
    };
    for s in sentences(text) {
        let n = s.split_whitespace().count();
        if words > 0 && words + n > max_words {
            flush(&mut current, &mut words);
        }
        current.push(s);
        words += n;
        if words >= max_words {
            flush(&mut current, &mut words);
        }
    }
    flush(&mut current, &mut words);
    chunks
}

/// Reads one JSON object per non-blank line.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Chunk>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let chunk: Chunk = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidConfig(format!("chunk line {}: {e}", n + 1)))?;
        out.push(chunk);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut writer: W, chunks: &[Chunk]) -> Result<()> {
    for c in chunks {
        serde_json::to_writer(&mut writer, c)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packs_sentences_under_budget() {
        let sentence = "one two three four five six seven eight nine ten.";
        let text = vec![sentence; 25].join(" ");
        let chunks = chunk_text("doc", &text, 100, Some("wiki"));
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[0].text.split_whitespace().count(), 100);
        assert_eq!(chunks[2].text.split_whitespace().count(), 50);
        assert_eq!(chunks[1].id, "doc-1");
        assert_eq!(chunks[0].source.as_deref(), Some("wiki"));
    }

    #[test]
    fn oversize_sentence_kept_whole() {
        let long = vec!["word"; 150].join(" ") + ".";
        let text = format!("Short one. {long} Tail here.");
        let chunks = chunk_text("d", &text, 100, None);
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[1].text.split_whitespace().count(), 150);
        assert_eq!(chunks[2].text, "Tail here.");
    }

    #[test]
    fn decimal_points_do_not_split() {
        let chunks = chunk_text("d", "Range is 36.8 kWh. Next.", 3, None);
        assert_eq!(chunks[0].text, "Range is 36.8 kWh.");
    }

    #[test]
    fn jsonl_round_trip_and_blank_lines() {
        let chunks = vec![Chunk::new("a", "x"), Chunk::new("b", "y").with_source("s")];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &chunks).unwrap();
        buf.extend_from_slice(b"\n\n");
        assert_eq!(read_jsonl(&buf[..]).unwrap(), chunks);
    }

    #[test]
    fn bad_jsonl_line_reports_line_number() {
        let err = read_jsonl(&b"{\"id\":\"a\",\"text\":\"x\"}\nnot json\n"[..]).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }
}
