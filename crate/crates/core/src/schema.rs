//! The `Type: t, Slots: s1; s2` surface form and its canonical candidate.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ParseError;

/// Separator between a text and its schema inside a prompt line.
pub const SEPARATOR: &str = "→";

const TYPE_MARKER: &str = "type:";
const SLOTS_MARKER: &str = "slots:";

/// Lowercase, trim, collapse internal whitespace and strip trailing punctuation.
pub fn normalize_name(raw: &str) -> String {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    let lowered = collapsed.to_lowercase();
    lowered
        .trim_end_matches(is_trailing_punct)
        .trim_end()
        .to_owned()
}

fn is_trailing_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '。' | '，' | '；' | '、' | '：' | '！' | '？' | '…')
}

/// One parsed generation: an event type with its ordered, duplicate-free slots.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SchemaCandidate {
    #[serde(rename = "type")]
    pub event_type: String,
    pub slots: Vec<String>,
}

impl SchemaCandidate {
    /// Normalizes the type and slots, dropping empty and repeated slots.
    pub fn new<S: AsRef<str>>(event_type: &str, slots: impl IntoIterator<Item = S>) -> Self {
        let mut out: Vec<String> = Vec::new();
        for s in slots {
            let s = normalize_name(s.as_ref());
            if !s.is_empty() && !out.contains(&s) {
                out.push(s);
            }
        }
        Self {
            event_type: normalize_name(event_type),
            slots: out,
        }
    }

    /// True when the candidate survives a render/parse round trip unchanged.
    pub fn is_valid(&self) -> bool {
        let name_ok = |s: &str| {
            !s.is_empty()
                && normalize_name(s) == s
                && !s.contains(';')
                && !s.contains(SEPARATOR)
                && !s.to_ascii_lowercase().contains(SLOTS_MARKER)
        };
        name_ok(&self.event_type)
            && !self.event_type.starts_with(',')
            && self.slots.iter().all(|s| name_ok(s))
            && self
                .slots
                .iter()
                .enumerate()
                .all(|(i, s)| !self.slots[..i].contains(s))
    }
}

impl fmt::Display for SchemaCandidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_schema(&self.event_type, &self.slots))
    }
}

pub fn render_schema<S: AsRef<str>>(event_type: &str, slots: &[S]) -> String {
    let mut out = format!("Type: {event_type}, Slots:");
    for (i, s) in slots.iter().enumerate() {
        out.push_str(if i == 0 { " " } else { "; " });
        out.push_str(s.as_ref());
    }
    out
}

/// Reads one completion back into a candidate.
///
/// Leading whitespace is skipped and anything after the first newline or
/// separator is treated as stop-token residue. A missing `Slots:` marker
/// yields a type-only candidate.
pub fn parse_schema(raw: &str) -> Result<SchemaCandidate, ParseError> {
    let err = |reason| ParseError {
        reason,
        raw: raw.to_owned(),
    };
    let mut body = raw.trim_start();
    if let Some(cut) = body.find(['\n', '\r']) {
        body = &body[..cut];
    }
    if let Some(cut) = body.find(SEPARATOR) {
        body = &body[..cut];
    }

    // ASCII lowercasing keeps byte offsets aligned with `body`.
    let lowered = body.to_ascii_lowercase();
    let type_at = lowered
        .find(TYPE_MARKER)
        .ok_or_else(|| err("missing Type: marker"))?;
    let after_type = type_at + TYPE_MARKER.len();
    let (type_part, slot_part) = match lowered[after_type..].find(SLOTS_MARKER) {
        Some(rel) => {
            let slots_at = after_type + rel;
            (
                &body[after_type..slots_at],
                Some(&body[slots_at + SLOTS_MARKER.len()..]),
            )
        }
        None => (&body[after_type..], None),
    };

    let type_name = normalize_name(type_part.trim_matches(|c: char| c == ',' || c.is_whitespace()));
    if type_name.is_empty() {
        return Err(err("empty type name"));
    }
    let slots = slot_part
        .map(|s| s.split(';').collect::<Vec<_>>())
        .unwrap_or_default();
    Ok(SchemaCandidate::new(&type_name, slots))
}
