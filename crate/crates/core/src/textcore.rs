//! Word-level tokenization, vocabularies and token spans.
//!
//! Text is lowercased and split on whitespace; ASCII punctuation other than
//! `-` and `'` becomes a token of its own. Spans are 0-based and half-open.
//! The 1-based inclusive `(s, e)` convention maps to `start = s - 1, end = e`.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Splits text into normalized word tokens.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() && ch != '-' && ch != '\'' {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// Normalizes text to its canonical single-space token form.
pub fn normalize(text: &str) -> String {
    words(text).join(" ")
}

/// Dense, stable mapping between words and integer ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn reserved() -> Self {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for tok in RESERVED {
            vocab.push(tok.to_string());
        }
        vocab
    }

    fn push(&mut self, token: String) -> u32 {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Builds a vocabulary in first-appearance order after the reserved ids.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut vocab = Self::reserved();
        for text in corpus {
            for w in words(text.as_ref()) {
                vocab.push(w);
            }
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> TokenSeq {
        TokenSeq(
            words(text)
                .iter()
                .map(|w| self.id(w).unwrap_or(UNK))
                .collect(),
        )
    }

    /// Encodes already-normalized words.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> TokenSeq {
        TokenSeq(
            words
                .iter()
                .map(|w| self.id(w.as_ref()).unwrap_or(UNK))
                .collect(),
        )
    }

    /// Renders ids as space-separated words. Reserved ids other than UNK are
    /// dropped.
    pub fn detokenize(&self, seq: &TokenSeq) -> String {
        seq.ids()
            .iter()
            .filter(|&&id| id == UNK || id > UNK)
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Writes one token per line, reserved tokens first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for tok in &self.tokens {
            writeln!(file, "{tok}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path, e))?;
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::InvalidConfig(format!(
                "{}: vocabulary file must start with the four reserved tokens",
                path.display()
            )));
        }
        let mut vocab = Self::reserved();
        for line in &lines[RESERVED.len()..] {
            if vocab.index.contains_key(line) {
                return Err(Error::InvalidConfig(format!(
                    "{}: duplicate token `{line}`",
                    path.display()
                )));
            }
            vocab.push(line.clone());
        }
        Ok(vocab)
    }
}

/// A tokenized text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks ids against a vocabulary size.
    pub fn check(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                vocab: vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Returns a copy with EOS appended.
    pub fn with_eos(&self) -> TokenSeq {
        let mut ids = self.0.clone();
        ids.push(EOS);
        TokenSeq(ids)
    }

    pub fn slice(&self, span: Span) -> &[u32] {
        &self.0[span.start..span.end]
    }
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    /// Validated constructor: `start < end <= len`.
    pub fn new(start: usize, end: usize, len: usize) -> Result<Self> {
        if start < end && end <= len {
            Ok(Span { start, end })
        } else {
            Err(Error::InvalidSpan { start, end, len })
        }
    }

    /// From 1-based inclusive indices.
    pub fn from_one_based(s: usize, e: usize, len: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::InvalidSpan {
                start: 0,
                end: e,
                len,
            });
        }
        Span::new(s - 1, e, len)
    }

    pub fn to_one_based(self) -> (usize, usize) {
        (self.start + 1, self.end)
    }

    pub fn len(self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(self) -> bool {
        self.start >= self.end
    }

    pub fn is_valid_for(self, len: usize) -> bool {
        self.start < self.end && self.end <= len
    }

    pub fn overlaps(self, other: Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(self, pos: usize) -> bool {
        self.start <= pos && pos < self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// First occurrence of `phrase` in `seq` at or after `from`.
pub fn locate_phrase<T: PartialEq>(seq: &[T], phrase: &[T], from: usize) -> Option<Span> {
    if phrase.is_empty() || phrase.len() > seq.len() {
        return None;
    }
    (from..=seq.len() - phrase.len())
        .find(|&i| seq[i..i + phrase.len()] == *phrase)
        .map(|i| Span {
            start: i,
            end: i + phrase.len(),
        })
}
