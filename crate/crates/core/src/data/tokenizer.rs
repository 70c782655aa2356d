//! GPT-2 byte-level byte-pair encoding.
//!
//! Loads the standard two-file format: a JSON map from token string to id
//! (`encoder.json`) and a ranked merge list (`vocab.bpe`). Text is split with
//! the GPT-2 pre-tokenizer pattern, each piece is mapped byte-by-byte onto the
//! printable byte alphabet, and merges are applied lowest rank first.

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};

const PRETOKENIZE: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// Name of the end-of-text special token in the published vocabulary.
pub const END_OF_TEXT: &str = "<|endoftext|>";

/// The GPT-2 map from raw bytes to printable characters.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..256u32 {
        let printable = (33..=126).contains(&b) || (161..=172).contains(&b) || (174..=255).contains(&b);
        table[b as usize] = if printable {
            char::from_u32(b).expect("latin-1")
        } else {
            extra += 1;
            char::from_u32(255 + extra).expect("valid code point")
        };
    }
    table
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    encoder: HashMap<String, usize>,
    decoder: Vec<String>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pattern: Regex,
}

impl Tokenizer {
    pub fn from_files(encoder_path: &Path, merges_path: &Path) -> Result<Self> {
        let encoder_text = std::fs::read_to_string(encoder_path).map_err(|e| Error::io(encoder_path, e))?;
        let merges_text = std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        Self::from_strs(&encoder_text, &merges_text, encoder_path, merges_path)
    }

    /// Builds a tokenizer from file contents; the paths only label errors.
    pub fn from_strs(encoder_json: &str, merges: &str, encoder_path: &Path, merges_path: &Path) -> Result<Self> {
        let encoder: HashMap<String, usize> = serde_json::from_str(encoder_json).map_err(|e| Error::Parse {
            path: encoder_path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let n = encoder.len();
        let mut decoder = vec![String::new(); n];
        let mut seen = vec![false; n];
        for (tok, &id) in &encoder {
            if id >= n || seen[id] {
                return Err(Error::Parse {
                    path: encoder_path.to_path_buf(),
                    line: 1,
                    msg: format!("token {tok:?} has id {id}; ids must be a permutation of 0..{n}"),
                });
            }
            seen[id] = true;
            decoder[id] = tok.clone();
        }

        let mut ranks = HashMap::new();
        for (lineno, line) in merges.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    let rank = ranks.len();
                    ranks.insert((a.to_string(), b.to_string()), rank);
                }
                _ => {
                    return Err(Error::Parse {
                        path: merges_path.to_path_buf(),
                        line: lineno + 1,
                        msg: format!("expected two space-separated symbols, got {line:?}"),
                    })
                }
            }
        }

        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        for c in byte_encoder {
            if !encoder.contains_key(&c.to_string()) {
                return Err(Error::Parse {
                    path: encoder_path.to_path_buf(),
                    line: 1,
                    msg: format!("vocabulary lacks the single-byte token {c:?}"),
                });
            }
        }
        Ok(Self {
            encoder,
            decoder,
            ranks,
            byte_encoder,
            byte_decoder,
            pattern: Regex::new(PRETOKENIZE).expect("static pattern"),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.encoder.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.decoder.get(id).map(String::as_str)
    }

    /// Id of `<|endoftext|>`, used as the article/summary separator.
    pub fn separator(&self) -> Result<usize> {
        self.token_id(END_OF_TEXT)
            .ok_or_else(|| Error::contract(format!("vocabulary has no {END_OF_TEXT} token")))
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for piece in self.pattern.find_iter(text) {
            let piece = piece.expect("pre-tokenizer pattern cannot fail on valid input");
            self.encode_piece(piece.as_str().as_bytes(), &mut out);
        }
        out
    }

    /// Encodes arbitrary bytes; invalid UTF-8 bytes become single-byte pieces.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<usize> {
        let mut out = Vec::new();
        for chunk in bytes.utf8_chunks() {
            out.extend(self.encode(chunk.valid()));
            for &b in chunk.invalid() {
                self.encode_piece(&[b], &mut out);
            }
        }
        out
    }

    fn encode_piece(&self, bytes: &[u8], out: &mut Vec<usize>) {
        let mut symbols: Vec<String> = bytes
            .iter()
            .map(|&b| self.byte_encoder[b as usize].to_string())
            .collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && self.ranks.get(&(symbols[i].clone(), symbols[i + 1].clone())) == Some(&rank)
                {
                    merged.push(format!("{}{}", symbols[i], symbols[i + 1]));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        for s in symbols {
            // Every merge result is in the published vocabulary; fall back to
            // bytes if a hand-made merge list disagrees with its encoder.
            match self.encoder.get(&s) {
                Some(&id) => out.push(id),
                None => out.extend(s.chars().map(|c| self.encoder[&c.to_string()])),
            }
        }
    }

    pub fn decode_bytes(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.decoder.get(id).ok_or(Error::Index {
                what: "token id",
                index: id,
                bound: self.decoder.len(),
            })?;
            for c in tok.chars() {
                match self.byte_decoder.get(&c) {
                    Some(&b) => out.push(b),
                    // special tokens such as <|endoftext|> are plain ASCII
                    None => out.extend(c.to_string().as_bytes()),
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`Tokenizer::encode`]; invalid UTF-8 is replaced lossily.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }
}

/// Encoder/merge file contents for a merge-free byte vocabulary
/// (256 byte tokens plus `<|endoftext|>`).
pub fn byte_vocabulary_files() -> (String, String) {
    let mut map = serde_json::Map::new();
    for (b, c) in bytes_to_unicode().iter().enumerate() {
        map.insert(c.to_string(), serde_json::Value::from(b));
    }
    map.insert(END_OF_TEXT.to_string(), serde_json::Value::from(256));
    (
        serde_json::to_string(&map).expect("serializable"),
        "#version: 0.2\n".to_string(),
    )
}
