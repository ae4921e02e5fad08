use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Corpus, DatasetError};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
/// Pooled-marker id. Reserved for parity with encoders that prepend one;
/// pooling here is a masked mean, so the id never appears in encoded input.
pub const CLS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["[PAD]", "[MASK]", "[CLS]", "[UNK]"];

pub fn is_reserved(id: usize) -> bool {
    id < RESERVED.len()
}

/// Dense token ↔ id map. Ids `0..4` are the reserved block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// Hex SHA-256 over the full token list; identifies the id assignment.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex_digest(h)
    }

    /// One token per line; line `i` holds id `i + 4`.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut out = String::new();
        for w in self.words() {
            out.push_str(w);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| DatasetError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        let mut seen = BTreeSet::new();
        let mut words = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || RESERVED.contains(&line) || !seen.insert(line.to_string()) {
                return Err(DatasetError::Malformed {
                    line: i + 1,
                    field: "token".into(),
                    reason: format!("empty, reserved or duplicate token {line:?}"),
                });
            }
            words.push(line.to_string());
        }
        Ok(Self::from_words(words))
    }
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Vocabulary over every token of every corpus plus the reserved block.
/// Ids are assigned in sorted token order, so input order never matters.
pub fn build_vocabulary(corpora: &[&Corpus]) -> Vocabulary {
    let mut words = BTreeSet::new();
    for corpus in corpora {
        for ex in &corpus.examples {
            for t in &ex.tokens {
                if !RESERVED.contains(&t.as_str()) {
                    words.insert(t.clone());
                }
            }
        }
    }
    Vocabulary::from_words(words)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Example;

    fn corpus(tokens: &[&[&str]]) -> Corpus {
        Corpus {
            examples: tokens
                .iter()
                .enumerate()
                .map(|(i, t)| Example {
                    id: format!("e{i}"),
                    tokens: t.iter().map(|s| s.to_string()).collect(),
                    label: 0,
                    shortcut_positions: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn two_tokens_plus_reserved() {
        let v = build_vocabulary(&[&corpus(&[&["a", "b", "a"]])]);
        assert_eq!(v.len(), 2 + RESERVED.len());
    }

    #[test]
    fn order_does_not_matter() {
        let a = build_vocabulary(&[&corpus(&[&["x", "y", "z"]])]);
        let b = build_vocabulary(&[&corpus(&[&["z", "x"], &["y"]])]);
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn round_trip_and_unknowns() {
        let v = build_vocabulary(&[&corpus(&[&["rain", "no"]])]);
        for w in ["rain", "no"] {
            assert_eq!(v.token(v.id(w)), Some(w));
        }
        assert_eq!(v.id("sunshine"), UNK);
        let reserved: BTreeSet<usize> = [PAD, MASK, CLS, UNK].into_iter().collect();
        assert_eq!(reserved.len(), 4);
    }

    #[test]
    fn file_round_trip() {
        let v = build_vocabulary(&[&corpus(&[&["q", "r", "s"]])]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "q\nr\ns\n");
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }
}
