//! Corpus readers, the document-halving heuristic for unlabeled text, and
//! article/summary truncation.

use std::path::Path;

use serde::Deserialize;

use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub source_len_chars: usize,
}

impl TokenSequence {
    pub fn from_text(tok: &Tokenizer, text: &str) -> Self {
        Self {
            ids: tok.encode(text),
            source_len_chars: text.chars().count(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SummarizationExample {
    pub article: TokenSequence,
    pub summary: TokenSequence,
}

impl SummarizationExample {
    /// `article ++ [separator] ++ summary`.
    pub fn joined(&self, separator: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.article.len() + 1 + self.summary.len());
        out.extend_from_slice(&self.article.ids);
        out.push(separator);
        out.extend_from_slice(&self.summary.ids);
        out
    }

    pub fn joined_len(&self) -> usize {
        self.article.len() + 1 + self.summary.len()
    }
}

/// Shortens an example so that its joined form fits in `limit` tokens.
///
/// The article loses tokens from its end first; the summary is only cut
/// (also from the end) when it cannot fit on its own.
pub fn truncate(example: &SummarizationExample, limit: usize) -> SummarizationExample {
    let mut out = example.clone();
    if out.joined_len() <= limit {
        return out;
    }
    let summary_room = limit.saturating_sub(1);
    if out.summary.len() > summary_room {
        out.summary.ids.truncate(summary_room);
        out.article.ids.clear();
    } else {
        out.article.ids.truncate(limit - 1 - out.summary.len());
    }
    out
}

/// Splits an unlabeled document into (article, summary) halves at the
/// whitespace character nearest the character midpoint. That one whitespace
/// character is dropped; nothing else is lost. Documents without whitespace
/// are cut at the character midpoint.
pub fn openwebtext_split(doc: &str) -> (String, String) {
    let chars: Vec<char> = doc.chars().collect();
    let n = chars.len();
    // splitting on char i leaves i chars before and n-1-i after
    let best = chars
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_whitespace())
        .map(|(i, _)| ((2 * i + 1).abs_diff(n), i))
        .min();
    match best {
        Some((_, i)) => (chars[..i].iter().collect(), chars[i + 1..].iter().collect()),
        None => {
            let mid = n / 2;
            (chars[..mid].iter().collect(), chars[mid..].iter().collect())
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    article: String,
    summary: String,
}

/// Article/summary text pairs from newline-delimited JSON records
/// `{"article": ..., "summary": ...}`. Blank lines are skipped.
pub fn read_jsonl(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    parse_jsonl(&text, path)
}

pub fn parse_jsonl(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push((rec.article, rec.summary));
    }
    Ok(out)
}

/// Documents separated by one or more blank lines.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.split('\n') {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        docs.push(current.join("\n"));
    }
    docs
}

pub fn read_raw(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    Ok(split_documents(&text))
}

pub fn tokenize_pairs(tok: &Tokenizer, pairs: &[(String, String)]) -> Vec<SummarizationExample> {
    pairs
        .iter()
        .map(|(a, s)| SummarizationExample {
            article: TokenSequence::from_text(tok, a),
            summary: TokenSequence::from_text(tok, s),
        })
        .collect()
}
