//! Strict readers for the decision and instruction XML responses.

use quick_xml::escape::unescape;

use crate::profile::{canonical_text, Preference};
use crate::{Error, Result, Scalar};

use super::{Decision, DecisionRecord};

/// Inner text of every `<tag>...</tag>` in `raw`, in order. An opening tag
/// without its close is malformed.
fn elements<'a>(raw: &'a str, tag: &str) -> Result<Vec<&'a str>> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut out = Vec::new();
    let mut rest = raw;
    while let Some(start) = rest.find(&open) {
        let body = &rest[start + open.len()..];
        let end = body
            .find(&close)
            .ok_or_else(|| Error::MalformedResponse(format!("unterminated <{tag}>")))?;
        out.push(&body[..end]);
        rest = &body[end + close.len()..];
    }
    Ok(out)
}

fn text_of(inner: &str) -> Result<String> {
    unescape(inner.trim())
        .map(|s| s.into_owned())
        .map_err(|e| Error::MalformedResponse(format!("bad entity: {e}")))
}

/// Reads a decision response. Listed preferences must match an allowed
/// preference text exactly (modulo surrounding whitespace); anything else is
/// dropped, and a Keep left with no preferences becomes a Discard.
pub fn parse_decision<T: Scalar>(raw: &str, allowed: &[&Preference<T>]) -> Result<DecisionRecord> {
    let decision = match elements(raw, "decision")?.first() {
        Some(d) => match text_of(d)?.to_ascii_lowercase().as_str() {
            "keep" => Decision::Keep,
            "discard" => Decision::Discard,
            other => {
                return Err(Error::MalformedResponse(format!(
                    "unknown decision {other:?}"
                )))
            }
        },
        None => return Err(Error::MalformedResponse("missing <decision>".into())),
    };
    let rationale = match elements(raw, "reason")?.first() {
        Some(r) => text_of(r)?,
        None => return Err(Error::MalformedResponse("missing <reason>".into())),
    };

    let mut listed = Vec::new();
    for section in elements(raw, "relevant_preferences")? {
        for p in elements(section, "preference")? {
            listed.push(canonical_text(&text_of(p)?));
        }
    }

    if decision == Decision::Discard {
        return Ok(DecisionRecord::discard(rationale));
    }
    for text in &listed {
        if !allowed.iter().any(|p| &p.text == text) {
            tracing::warn!(preference = %text, "dropping preference not in the candidate set");
        }
    }
    let refined: Vec<String> = allowed
        .iter()
        .filter(|p| listed.iter().any(|t| t == &p.text))
        .map(|p| p.id.clone())
        .collect();
    if refined.is_empty() {
        return Ok(DecisionRecord::discard(rationale));
    }
    Ok(DecisionRecord {
        decision: Decision::Keep,
        rationale,
        refined_preferences: refined,
        confidence: None,
    })
}

/// Reads the single `<instruction>` element of an instruction response.
pub fn parse_instruction(raw: &str) -> Result<String> {
    let found = elements(raw, "instruction")?;
    match found.as_slice() {
        [one] => {
            let text = text_of(one)?;
            if text.is_empty() {
                Err(Error::MalformedResponse("empty <instruction>".into()))
            } else {
                Ok(text)
            }
        }
        [] => Err(Error::MalformedResponse("missing <instruction>".into())),
        many => Err(Error::MalformedResponse(format!(
            "expected one <instruction>, found {}",
            many.len()
        ))),
    }
}
