//! Closed token inventories and integer-encoded sentences.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Smallest vocabulary accepted: the four reserved symbols plus one word.
pub const MIN_VOCAB: usize = 5;

/// Token ids of one sentence. BOS is never stored; EOS is implied.
pub type TokenSequence = Vec<u32>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from the non-reserved words, in id order.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary needs at least {MIN_VOCAB} entries, got {}",
                tokens.len()
            )));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return Err(Error::Config(format!(
                    "reserved id {i} must be {r}, found {}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary entry {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Most frequent tokens first, ties broken lexicographically, truncated so
    /// the whole vocabulary (reserved ids included) holds at most `max_size`.
    pub fn build<'s, I>(sentences: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'s [String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for sentence in sentences {
            any = true;
            for tok in sentence {
                if !RESERVED.contains(&tok.as_str()) {
                    *counts.entry(tok.as_str()).or_default() += 1;
                }
            }
        }
        if !any {
            return Err(Error::Contract("cannot build a vocabulary from no sentences".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(RESERVED.len());
        let words: Vec<&str> = ranked.into_iter().take(keep).map(|(w, _)| w).collect();
        Self::from_words(&words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace-tokenizes `line`; unknown words become UNK.
    pub fn encode(&self, line: &str) -> TokenSequence {
        line.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> TokenSequence {
        words.iter().map(|w| self.id(w.as_ref()).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn validate(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.len()) {
            Some(&id) => Err(Error::Index {
                id: id as usize,
                len: self.len(),
            }),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Decoder output index for a target token id. PAD and BOS are never
/// predicted, so the output layer covers ids `2..V`.
pub fn output_index(token: u32) -> usize {
    debug_assert!(token >= EOS);
    (token - EOS) as usize
}

pub fn token_from_output(index: usize) -> u32 {
    index as u32 + EOS
}
