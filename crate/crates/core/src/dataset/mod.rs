//! Synthetic shortcut corpora, vocabulary and the line-delimited corpus format.

mod corpus;
mod generate;
mod vocab;

use std::path::Path;

use thiserror::Error;

pub use corpus::{encode, encode_corpus, encode_example, Corpus, EncodedExample, Example};
pub use generate::{generate_corpus, PoolSizes, ShortcutSpec, Splits};
pub use vocab::{build_vocabulary, is_reserved, Vocabulary, CLS, MASK, PAD, RESERVED, UNK};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: field `{field}`: {reason}")]
    Malformed {
        line: usize,
        field: String,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
