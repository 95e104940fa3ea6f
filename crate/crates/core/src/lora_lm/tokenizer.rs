//! Whitespace + punctuation tokenizer with a frequency-capped vocabulary.
//!
//! Words are split on whitespace; leading `$` / `(` and trailing
//! `, . : ; ! ? )` characters are peeled off as separate tokens. Internal
//! punctuation stays, so `2015-03-28` and `39.82` are single tokens.

use std::collections::HashMap;
use std::path::Path;

use crate::domain::Category;
use crate::error::{Error, Result};
use crate::io;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const PAD_ID: usize = 3;

const LEADING: &[char] = &['$', '('];
const TRAILING: &[char] = &[',', '.', ':', ';', '!', '?', ')'];

/// Splits text into token strings.
pub fn split(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut w = word;
        while let Some(c) = w.chars().next().filter(|c| LEADING.contains(c)) {
            out.push(&w[..c.len_utf8()]);
            w = &w[c.len_utf8()..];
        }
        let mut tail = Vec::new();
        while let Some(c) = w.chars().next_back().filter(|c| TRAILING.contains(c)) {
            let at = w.len() - c.len_utf8();
            tail.push(&w[at..]);
            w = &w[..at];
        }
        if !w.is_empty() {
            out.push(w);
        }
        out.extend(tail.into_iter().rev());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    fn from_vocab(vocab: Vec<String>) -> Result<Tokenizer> {
        let specials = [BOS, EOS, UNK, PAD];
        if vocab.len() < specials.len() || vocab[..4].iter().zip(specials).any(|(a, b)| a != b) {
            return Err(Error::Invalid("vocabulary must start with <bos>, <eos>, <unk>, <pad>".into()));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, t) in vocab.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Tokenizer { vocab, index })
    }

    /// Keeps tokens seen at least `min_count` times, most frequent first
    /// (ties alphabetical), up to `max_vocab` entries including the four
    /// specials. Every category label sentence is always representable.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize, max_vocab: usize) -> Tokenizer {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for t in split(text) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut vocab: Vec<String> = [BOS, EOS, UNK, PAD].map(String::from).to_vec();
        for c in Category::ALL {
            for t in split(c.label_sentence()) {
                if !vocab.iter().any(|v| v == t) {
                    vocab.push(t.to_string());
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, n)| n >= min_count && !vocab.iter().any(|v| v == t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = max_vocab.saturating_sub(vocab.len());
        vocab.extend(ranked.into_iter().take(room).map(|(t, _)| t.to_string()));
        Tokenizer::from_vocab(vocab).expect("specials first, entries unique")
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split(text)
            .into_iter()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect()
    }

    /// Joins tokens with single spaces, re-attaching peeled punctuation.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut glue_next = false;
        for &id in ids {
            let t = self.token(id).unwrap_or(UNK);
            let trailing = t.chars().count() == 1 && t.chars().all(|c| TRAILING.contains(&c));
            if !out.is_empty() && !trailing && !glue_next {
                out.push(' ');
            }
            out.push_str(t);
            glue_next = t.chars().count() == 1 && t.chars().all(|c| LEADING.contains(&c));
        }
        out
    }

    /// Vocabulary persisted as a JSON list of strings.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        io::write_json(&self.vocab, path)
    }

    pub fn load_json(path: &Path) -> Result<Tokenizer> {
        Tokenizer::from_vocab(io::read_json(path)?)
    }
}
