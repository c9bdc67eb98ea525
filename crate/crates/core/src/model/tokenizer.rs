//! Word/punctuation tokenizer with single-digit numbers.
//!
//! Text is first cut into pieces: reserved literals (`[True]`, `[False]`,
//! `<image>`), single digits, letter runs with an optional leading space, and
//! single characters for everything else. The vocabulary is the reserved
//! set, the ten digits, printable ASCII, then the most frequent pieces of a
//! fitting corpus. Because every piece maps to exactly one id (possibly
//! `UNK`), token counts do not depend on the fitted vocabulary.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const TRUE: u32 = 4;
pub const FALSE: u32 = 5;
pub const IMAGE: u32 = 6;

pub const MAX_VOCAB: usize = 4096;

const RESERVED: [&str; 7] = ["<pad>", "<bos>", "<eos>", "<unk>", "[True]", "[False]", "<image>"];
/// Reserved entries that are recognised inside raw text.
const TEXT_LITERALS: [(&str, u32); 3] = [("[True]", TRUE), ("[False]", FALSE), ("<image>", IMAGE)];

/// Cuts `text` into tokenizer pieces.
pub fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut i = 0;
    let bytes = text.as_bytes();
    'outer: while i < text.len() {
        let rest = &text[i..];
        for (lit, _) in TEXT_LITERALS {
            if rest.starts_with(lit) {
                out.push(&rest[..lit.len()]);
                i += lit.len();
                continue 'outer;
            }
        }
        let c = rest.chars().next().expect("non-empty");
        let start = i;
        if c.is_alphabetic() || (bytes[i] == b' ' && starts_word(&rest[1..])) {
            i += c.len_utf8();
            for ch in text[i..].chars() {
                if !ch.is_alphabetic() {
                    break;
                }
                i += ch.len_utf8();
            }
        } else {
            i += c.len_utf8();
        }
        out.push(&text[start..i]);
    }
    out
}

fn starts_word(s: &str) -> bool {
    s.chars().next().is_some_and(char::is_alphabetic)
}

/// Number of tokens `text` encodes to under any fitted vocabulary.
pub fn count_pieces(text: &str) -> usize {
    pieces(text).len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    pieces: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Builds a vocabulary of at most `max_vocab` entries from a corpus.
    pub fn fit<'a>(corpus: impl IntoIterator<Item = &'a str>, max_vocab: usize) -> Result<Self> {
        let max_vocab = max_vocab.min(MAX_VOCAB);
        let mut base: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        base.extend(('0'..='9').map(String::from));
        base.push("\n".into());
        base.extend((0x20u8..0x7f).filter(|b| !b.is_ascii_digit()).map(|b| (b as char).to_string()));
        if base.len() > max_vocab {
            return Err(Error::Config(format!(
                "vocabulary cap {max_vocab} below the {} base entries",
                base.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in corpus {
            for p in pieces(text) {
                *counts.entry(p).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(p, _)| !base.iter().any(|b| b == p))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = max_vocab - base.len();
        base.extend(ranked.into_iter().take(room).map(|(p, _)| p.to_string()));
        Ok(Self::from_pieces(base))
    }

    fn from_pieces(pieces: Vec<String>) -> Self {
        let index = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        Self { pieces, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pieces(text)
            .into_iter()
            .map(|p| self.index.get(p).copied().unwrap_or(UNK))
            .collect()
    }

    /// Inverse of [`Tokenizer::encode`]; control tokens are dropped, `UNK` renders as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.piece(id).unwrap_or("<unk>"))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: Tokenizer = serde_json::from_str(&text)?;
        if raw.pieces.len() < RESERVED.len() || raw.pieces[..RESERVED.len()] != RESERVED {
            return Err(Error::Invalid(format!(
                "{}: tokenizer does not start with the reserved entries",
                path.display()
            )));
        }
        Ok(Self::from_pieces(raw.pieces))
    }
}
