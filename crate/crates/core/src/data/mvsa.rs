//! MVSA label reconciliation and raw TSV input.

use std::path::Path;

use crate::error::{Error, Result};

pub const NEGATIVE: usize = 0;
pub const NEUTRAL: usize = 1;
pub const POSITIVE: usize = 2;
pub const SENTIMENT_NAMES: [&str; 3] = ["negative", "neutral", "positive"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reconciled {
    Keep(usize),
    Discard,
}

/// Agreement keeps the label, a neutral side defers to the other side, and
/// positive against negative is discarded.
pub fn reconcile_mvsa(text_label: usize, image_label: usize) -> Result<Reconciled> {
    for l in [text_label, image_label] {
        if l > POSITIVE {
            return Err(Error::Data(format!("sentiment label {l} outside {{0, 1, 2}}")));
        }
    }
    Ok(match (text_label, image_label) {
        (a, b) if a == b => Reconciled::Keep(a),
        (NEUTRAL, other) | (other, NEUTRAL) => Reconciled::Keep(other),
        _ => Reconciled::Discard,
    })
}

/// Accepts `negative|neutral|positive` (any case) or `0|1|2`.
pub fn parse_sentiment(s: &str) -> Result<usize> {
    let s = s.trim().to_lowercase();
    if let Some(i) = SENTIMENT_NAMES.iter().position(|n| *n == s) {
        return Ok(i);
    }
    match s.parse::<usize>() {
        Ok(i) if i <= POSITIVE => Ok(i),
        _ => Err(Error::Data(format!("unknown sentiment label `{s}`"))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPair {
    pub id: String,
    pub text: String,
    pub image_path: String,
    pub text_label: usize,
    pub image_label: usize,
}

const HEADER: [&str; 5] = ["id", "text", "text_label", "image_label", "image_path"];

/// Parses the tab-separated raw file (header row first). Errors name the
/// 1-based line.
pub fn parse_mvsa_tsv(text: &str) -> Result<Vec<RawPair>> {
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty MVSA input: missing header".into()))?
        .1;
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    if cols != HEADER {
        return Err(Error::Data(format!("line 1: expected header {}", HEADER.join("\\t"))));
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != HEADER.len() {
            return Err(Error::Data(format!(
                "line {lineno}: expected {} tab-separated fields, found {}",
                HEADER.len(),
                fields.len()
            )));
        }
        let with_line = |e: Error| Error::Data(format!("line {lineno}: {e}"));
        let id = fields[0].trim();
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || id.starts_with('.') {
            return Err(Error::Data(format!("line {lineno}: invalid id `{id}`")));
        }
        rows.push(RawPair {
            id: id.to_string(),
            text: fields[1].to_string(),
            text_label: parse_sentiment(fields[2]).map_err(with_line)?,
            image_label: parse_sentiment(fields[3]).map_err(with_line)?,
            image_path: fields[4].trim().to_string(),
        });
    }
    if rows.is_empty() {
        return Err(Error::Data("MVSA input has no rows".into()));
    }
    Ok(rows)
}

pub fn read_mvsa_tsv(path: &Path) -> Result<Vec<RawPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mvsa_tsv(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
