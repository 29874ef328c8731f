//! Toy tokenizers: whitespace words, raw integer ids and UTF-8 bytes.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub trait Tokenizer: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<u32>>;
    fn decode(&self, tokens: &[u32]) -> String;
    fn token_id(&self, token: &str) -> Option<u32>;
    fn eos(&self) -> Option<u32>;

    /// Token pattern for `text` when it encodes losslessly.
    fn pattern(&self, text: &str) -> Option<Vec<u32>> {
        let ids = self.encode(text).ok()?;
        (!ids.is_empty() && self.decode(&ids) == text).then_some(ids)
    }
}

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const NEWLINE: &str = "\n";

/// Whitespace tokenizer over a fixed word list.
///
/// Newlines are tokens of their own; other whitespace only separates words.
/// Decoding joins words with single spaces and never puts spaces around a
/// newline, so `encode(decode(ids)) == ids` for any ids without `<unk>`.
#[derive(Debug, Clone)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
    unk: u32,
    eos: u32,
    newline: u32,
}

impl WordVocab {
    /// Builds a vocabulary; `<unk>`, `<eos>` and the newline token are
    /// prepended when missing.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = vec![UNK.into(), EOS.into(), NEWLINE.into()];
        for w in words {
            let w = w.into();
            if w.is_empty() || (w != NEWLINE && w.chars().any(char::is_whitespace)) {
                return Err(Error::config(format!("invalid vocabulary word {w:?}")));
            }
            if !all.contains(&w) {
                all.push(w);
            }
        }
        let index = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Ok(Self {
            words: all,
            index,
            unk: 0,
            eos: 1,
            newline: 2,
        })
    }

    pub fn unk(&self) -> u32 {
        self.unk
    }

    pub fn newline(&self) -> u32 {
        self.newline
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

impl Tokenizer for WordVocab {
    fn vocab_size(&self) -> usize {
        self.words.len()
    }

    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for (i, line) in text.split('\n').enumerate() {
            if i > 0 {
                out.push(self.newline);
            }
            out.extend(
                line.split_whitespace()
                    .map(|w| self.index.get(w).copied().unwrap_or(self.unk)),
            );
        }
        Ok(out)
    }

    fn decode(&self, tokens: &[u32]) -> String {
        let mut s = String::new();
        let mut after_word = false;
        for &t in tokens {
            if t == self.eos {
                continue;
            }
            if t == self.newline {
                s.push('\n');
                after_word = false;
                continue;
            }
            if after_word {
                s.push(' ');
            }
            s.push_str(self.word(t).unwrap_or(UNK));
            after_word = true;
        }
        s
    }

    fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    fn eos(&self) -> Option<u32> {
        Some(self.eos)
    }
}

/// Integer tokenization: text is whitespace-separated decimal ids.
#[derive(Debug, Clone)]
pub struct IndexTokenizer {
    vocab_size: usize,
}

impl IndexTokenizer {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size }
    }
}

impl Tokenizer for IndexTokenizer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                w.parse::<u32>()
                    .ok()
                    .filter(|&t| (t as usize) < self.vocab_size)
                    .ok_or_else(|| Error::validation(format!("not a token id: {w:?}")))
            })
            .collect()
    }

    fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn token_id(&self, token: &str) -> Option<u32> {
        token
            .parse()
            .ok()
            .filter(|&t: &u32| (t as usize) < self.vocab_size)
    }

    fn eos(&self) -> Option<u32> {
        None
    }
}

/// Lossless UTF-8 byte tokenizer; id 256 is end-of-sequence.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const EOS: u32 = 256;
}

impl Tokenizer for ByteTokenizer {
    fn vocab_size(&self) -> usize {
        257
    }

    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(text.bytes().map(u32::from).collect())
    }

    fn decode(&self, tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn token_id(&self, token: &str) -> Option<u32> {
        match token.as_bytes() {
            [b] => Some(u32::from(*b)),
            _ if token == EOS => Some(Self::EOS),
            _ => None,
        }
    }

    fn eos(&self) -> Option<u32> {
        Some(Self::EOS)
    }
}
