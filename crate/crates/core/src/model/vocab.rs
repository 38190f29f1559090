//! Word-level vocabulary with the reserved special tokens first.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{OreoError, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const S_ENT: usize = 2;
pub const REL: usize = 3;
pub const T_ENT: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[MASK]", "[S-ENT]", "[REL]", "[T-ENT]"];

pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// Vocabulary holding only the special tokens.
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in SPECIAL_TOKENS {
            v.add(t);
        }
        v
    }

    /// Returns the id of `word`, adding it when new.
    pub fn add(&mut self, word: &str) -> usize {
        if let Some(&i) = self.index.get(word) {
            return i;
        }
        self.tokens.push(word.to_string());
        self.index.insert(word.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| OreoError::Input(format!("token {w:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let word = line.trim();
            if word.is_empty() {
                continue;
            }
            if v.index.contains_key(word) {
                return Err(OreoError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("duplicate token {word:?}"),
                });
            }
            v.add(word);
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if v.word(i) != Some(*s) {
                return Err(OreoError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected special token {s}"),
                });
            }
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first_and_roundtrip() {
        let mut v = Vocab::new();
        assert_eq!(v.id("[T-ENT]"), Some(T_ENT));
        let a = v.add("alpha");
        assert_eq!(v.add("alpha"), a);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(VOCAB_FILE);
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
        std::fs::write(&p, "alpha\n").unwrap();
        assert!(matches!(Vocab::load(&p), Err(OreoError::Parse { .. })));
    }
}
