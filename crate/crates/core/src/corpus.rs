//! Corpus loading, tokenization and the length / numeric-content filters.
//!
//! One input line (plain text) or one record's `text` field (JSON lines) is
//! one expression unit. Units are never split further.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LanguageMode {
    /// Tokens are separated by unicode whitespace.
    #[default]
    SpaceDelimited,
    /// One token per non-whitespace grapheme cluster.
    Character,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    #[default]
    PlainLines,
    StructuredRecords,
}

/// One filtered input unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventExpression {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusFilterConfig {
    pub max_tokens: usize,
    pub max_numeric_ratio: f64,
    pub language: LanguageMode,
}

impl Default for CorpusFilterConfig {
    fn default() -> Self {
        Self {
            max_tokens: 256,
            max_numeric_ratio: 0.25,
            language: LanguageMode::SpaceDelimited,
        }
    }
}

impl CorpusFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens < 1 {
            return Err(Error::Config("corpus.max_tokens must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_numeric_ratio) {
            return Err(Error::Config(format!(
                "corpus.max_numeric_ratio must lie in [0, 1], got {}",
                self.max_numeric_ratio
            )));
        }
        Ok(())
    }
}

pub fn tokenize(text: &str, mode: LanguageMode) -> Vec<String> {
    match mode {
        LanguageMode::SpaceDelimited => text.split_whitespace().map(str::to_owned).collect(),
        LanguageMode::Character => text
            .graphemes(true)
            .filter(|g| !g.chars().all(char::is_whitespace))
            .map(str::to_owned)
            .collect(),
    }
}

/// A token is numeric when at least half of its characters are decimal digits.
pub fn is_numeric_token(token: &str) -> bool {
    let total = token.chars().count();
    if total == 0 {
        return false;
    }
    let digits = token.chars().filter(char::is_ascii_digit).count();
    2 * digits >= total
}

pub fn numeric_ratio(tokens: &[String]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let numeric = tokens.iter().filter(|t| is_numeric_token(t)).count();
    numeric as f64 / tokens.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscardReason {
    Empty,
    Length,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterDecision {
    Keep,
    Discard(DiscardReason),
}

/// Length is checked before numeric content, so an overlong numeric line is
/// reported as `length`.
pub fn filter_tokens(tokens: &[String], cfg: &CorpusFilterConfig) -> FilterDecision {
    if tokens.is_empty() {
        FilterDecision::Discard(DiscardReason::Empty)
    } else if tokens.len() > cfg.max_tokens {
        FilterDecision::Discard(DiscardReason::Length)
    } else if numeric_ratio(tokens) > cfg.max_numeric_ratio {
        FilterDecision::Discard(DiscardReason::Numeric)
    } else {
        FilterDecision::Keep
    }
}

pub fn filter_expression(expr: &EventExpression, cfg: &CorpusFilterConfig) -> FilterDecision {
    if expr.text.trim().is_empty() {
        return FilterDecision::Discard(DiscardReason::Empty);
    }
    filter_tokens(&expr.tokens, cfg)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub total: usize,
    pub kept: usize,
    pub empty: usize,
    pub length: usize,
    pub numeric: usize,
    pub malformed: usize,
}

impl LoadReport {
    pub fn discarded(&self) -> usize {
        self.empty + self.length + self.numeric + self.malformed
    }

    fn count(&mut self, reason: DiscardReason) {
        match reason {
            DiscardReason::Empty => self.empty += 1,
            DiscardReason::Length => self.length += 1,
            DiscardReason::Numeric => self.numeric += 1,
        }
    }
}

#[derive(Deserialize)]
struct InputRecord {
    text: String,
    #[serde(default)]
    id: Option<serde_json::Value>,
}

pub fn load_corpus(
    path: &Path,
    format: InputFormat,
    cfg: &CorpusFilterConfig,
) -> Result<(Vec<EventExpression>, LoadReport)> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let label = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(parse_corpus(
        &raw,
        &label,
        &path.display().to_string(),
        format,
        cfg,
    ))
}

/// `label` seeds generated ids, `origin` is recorded in each expression's source.
pub fn parse_corpus(
    raw: &str,
    label: &str,
    origin: &str,
    format: InputFormat,
    cfg: &CorpusFilterConfig,
) -> (Vec<EventExpression>, LoadReport) {
    let mut report = LoadReport::default();
    let mut out = Vec::new();
    let mut seen_ids = HashSet::new();

    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        let (text, explicit_id) = match format {
            InputFormat::PlainLines => (line.to_owned(), None),
            InputFormat::StructuredRecords => {
                if line.trim().is_empty() {
                    // blank separator lines are not records
                    continue;
                }
                match serde_json::from_str::<InputRecord>(line) {
                    Ok(rec) => (rec.text, rec.id.map(id_to_string)),
                    Err(err) => {
                        log::warn!("{origin}:{line_no}: skipping malformed record: {err}");
                        report.total += 1;
                        report.malformed += 1;
                        continue;
                    }
                }
            }
        };
        report.total += 1;

        let id = explicit_id.unwrap_or_else(|| format!("{label}:{line_no}"));
        if !seen_ids.insert(id.clone()) {
            log::warn!("{origin}:{line_no}: duplicate id {id:?}, record skipped");
            report.malformed += 1;
            continue;
        }

        let text = text.trim().to_owned();
        let tokens = tokenize(&text, cfg.language);
        let expr = EventExpression {
            id,
            text,
            tokens,
            source: format!("{origin}:{line_no}"),
        };
        match filter_expression(&expr, cfg) {
            FilterDecision::Keep => {
                report.kept += 1;
                out.push(expr);
            }
            FilterDecision::Discard(reason) => report.count(reason),
        }
    }
    (out, report)
}

fn id_to_string(v: serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }
}
