use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::vocab::{Vocabulary, PAD};
use super::DatasetError;

/// One labelled sentence. `shortcut_positions` is generator metadata: the
/// indices of planted shortcut tokens. Nothing downstream of the generator
/// reads it except tests and evaluation of identification precision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: usize,
    pub shortcut_positions: Vec<usize>,
}

impl Example {
    pub fn has_shortcut(&self) -> bool {
        !self.shortcut_positions.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Writes one JSON object per line.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let file = fs::File::create(path).map_err(|e| DatasetError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for ex in &self.examples {
            serde_json::to_writer(&mut w, ex).expect("example serializes");
            w.write_all(b"\n").map_err(|e| DatasetError::io(path, e))?;
        }
        w.flush().map_err(|e| DatasetError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let file = fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
        let mut examples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| DatasetError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            examples.push(parse_record(&line, i + 1)?);
        }
        Ok(Self { examples })
    }
}

fn malformed(line: usize, field: &str, reason: impl Into<String>) -> DatasetError {
    DatasetError::Malformed {
        line,
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn parse_record(text: &str, line: usize) -> Result<Example, DatasetError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| malformed(line, "record", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed(line, "record", "not an object"))?;
    let field = |name: &str| obj.get(name).ok_or_else(|| malformed(line, name, "missing"));

    let id = field("id")?
        .as_str()
        .ok_or_else(|| malformed(line, "id", "not a string"))?
        .to_string();
    let tokens = field("tokens")?
        .as_array()
        .ok_or_else(|| malformed(line, "tokens", "not an array"))?
        .iter()
        .map(|t| t.as_str().map(str::to_string))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| malformed(line, "tokens", "non-string token"))?;
    let label = field("label")?
        .as_u64()
        .ok_or_else(|| malformed(line, "label", "not a non-negative integer"))? as usize;
    let shortcut_positions = field("shortcut_positions")?
        .as_array()
        .ok_or_else(|| malformed(line, "shortcut_positions", "not an array"))?
        .iter()
        .map(|p| p.as_u64().map(|p| p as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| malformed(line, "shortcut_positions", "non-integer position"))?;
    if let Some(p) = shortcut_positions.iter().find(|p| **p >= tokens.len()) {
        return Err(malformed(
            line,
            "shortcut_positions",
            format!("position {p} outside {} tokens", tokens.len()),
        ));
    }
    Ok(Example {
        id,
        tokens,
        label,
        shortcut_positions,
    })
}

/// Fixed-length id sequence: real tokens then PAD.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub id: String,
    pub ids: Vec<usize>,
    /// Number of real tokens before padding.
    pub len: usize,
    pub label: usize,
    pub shortcut_positions: Vec<usize>,
}

impl EncodedExample {
    /// Ids without the PAD tail.
    pub fn tokens(&self) -> &[usize] {
        &self.ids[..self.len]
    }
}

/// Pads or truncates to exactly `max_len` ids; unknown tokens map to UNK.
pub fn encode(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Result<(Vec<usize>, usize), DatasetError> {
    if max_len == 0 {
        return Err(DatasetError::Invalid("max_len must be at least 1".into()));
    }
    if tokens.is_empty() {
        return Err(DatasetError::Invalid("cannot encode an empty token list".into()));
    }
    let len = tokens.len().min(max_len);
    let mut ids: Vec<usize> = tokens[..len].iter().map(|t| vocab.id(t)).collect();
    ids.resize(max_len, PAD);
    Ok((ids, len))
}

pub fn encode_example(ex: &Example, vocab: &Vocabulary, max_len: usize) -> Result<EncodedExample, DatasetError> {
    let (ids, len) = encode(&ex.tokens, vocab, max_len)?;
    Ok(EncodedExample {
        id: ex.id.clone(),
        ids,
        len,
        label: ex.label,
        shortcut_positions: ex.shortcut_positions.iter().copied().filter(|p| *p < len).collect(),
    })
}

pub fn encode_corpus(corpus: &Corpus, vocab: &Vocabulary, max_len: usize) -> Result<Vec<EncodedExample>, DatasetError> {
    corpus
        .examples
        .iter()
        .map(|ex| encode_example(ex, vocab, max_len))
        .collect()
}
