//! Whitespace tokenizer and token vocabulary.
//!
//! The vocabulary file holds one token per line; the line number is the
//! index. Lines 0..=3 are always the reserved `[PAD]`, `[CLS]`, `[SEP]` and
//! `[OOV]` tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const OOV: usize = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[OOV]"];

/// Lowercases and splits on Unicode whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for TokenVocabulary {
    fn default() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl TokenVocabulary {
    /// Builds a vocabulary from texts, assigning indices by first occurrence.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Self::default();
        for text in texts {
            for tok in tokenize(text) {
                vocab.insert(tok);
            }
        }
        vocab
    }

    fn insert(&mut self, tok: String) -> usize {
        if let Some(&i) = self.index.get(&tok) {
            return i;
        }
        let i = self.tokens.len();
        self.index.insert(tok.clone(), i);
        self.tokens.push(tok);
        i
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::Validation(format!(
                "vocabulary must start with {RESERVED:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Validation(format!(
                    "vocabulary entry {i} is empty or contains whitespace"
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate vocabulary entry {t:?}"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV)
    }

    /// Tokenizes and wraps with `[CLS]` … `[SEP]`. Unknown words map to `[OOV]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![CLS];
        ids.extend(tokenize(text).iter().map(|t| self.index_of(t)));
        ids.push(SEP);
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_tokens(body.lines().map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_indices_and_first_occurrence_order() {
        let v = TokenVocabulary::build(["Book a table", "book a flight"]);
        assert_eq!(v.token(PAD), Some("[PAD]"));
        assert_eq!(v.token(OOV), Some("[OOV]"));
        assert_eq!(v.index_of("book"), 4);
        assert_eq!(v.index_of("a"), 5);
        assert_eq!(v.index_of("table"), 6);
        assert_eq!(v.index_of("flight"), 7);
        assert_eq!(v.index_of("zebra"), OOV);
        assert_eq!(v.encode("BOOK zebra"), vec![CLS, 4, OOV, SEP]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = TokenVocabulary::build(["x y z"]);
        v.save(&path).unwrap();
        assert_eq!(TokenVocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn rejects_missing_reserved_prefix() {
        assert!(TokenVocabulary::from_tokens(vec!["a".into()]).is_err());
    }
}
