//! Synthetic corpora with an engineered shortcut.
//!
//! Each sentence mixes filler, a few function words, and content words drawn
//! from per-label "genuine" pools. A content word comes from the sentence's
//! own label pool with probability `genuine_strength` and from another
//! label's pool otherwise; the label is always the strict plurality of the
//! content words, so the genuine words alone determine it in every split.
//!
//! On top of that, a fraction `shortcut_rate` of sentences receive one extra
//! shortcut token inserted at a random position. It comes from the label's
//! own shortcut pool with probability ρ (`rho_train` for train/dev, `rho_ood`
//! for the OOD split) and from a uniformly chosen other pool otherwise.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, DatasetError, Example};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolSizes {
    pub shortcut_per_label: usize,
    pub genuine_per_label: usize,
    pub filler: usize,
    pub function_words: usize,
    pub ood_filler: usize,
}

impl Default for PoolSizes {
    fn default() -> Self {
        Self {
            shortcut_per_label: 2,
            genuine_per_label: 30,
            filler: 200,
            function_words: 5,
            ood_filler: 20,
        }
    }
}

const FUNCTION_WORDS: [&str; 8] = ["the", "a", "of", "and", "to", "in", "is", "it"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortcutSpec {
    pub num_labels: usize,
    pub shortcut_pools: Vec<Vec<String>>,
    pub genuine_pools: Vec<Vec<String>>,
    pub filler: Vec<String>,
    pub function_words: Vec<String>,
    /// Filler that only the OOD split draws from.
    pub ood_filler: Vec<String>,
    pub rho_train: f64,
    pub rho_ood: f64,
    /// Fraction of sentences that carry a planted shortcut token.
    pub shortcut_rate: f64,
    /// Sentence length range before the shortcut token is inserted.
    pub min_len: usize,
    pub max_len: usize,
    pub content_min: usize,
    pub content_max: usize,
    /// Probability that a content word comes from the label's own pool.
    pub genuine_strength: f64,
    pub function_word_rate: f64,
    /// Probability an OOD filler slot draws from `ood_filler`.
    pub ood_shift: f64,
    pub train_size: usize,
    pub dev_size: usize,
    pub ood_size: usize,
    pub seed: u64,
}

impl ShortcutSpec {
    pub fn new(num_labels: usize, sizes: &PoolSizes) -> Self {
        let labelled = |prefix: &str, per: usize| -> Vec<Vec<String>> {
            (0..num_labels)
                .map(|k| (0..per).map(|i| format!("{prefix}{k}_{i}")).collect())
                .collect()
        };
        let function_words = (0..sizes.function_words)
            .map(|i| match FUNCTION_WORDS.get(i) {
                Some(w) => w.to_string(),
                None => format!("fn{i}"),
            })
            .collect();
        Self {
            num_labels,
            shortcut_pools: labelled("sc", sizes.shortcut_per_label),
            genuine_pools: labelled("g", sizes.genuine_per_label),
            filler: (0..sizes.filler).map(|i| format!("w{i}")).collect(),
            function_words,
            ood_filler: (0..sizes.ood_filler).map(|i| format!("v{i}")).collect(),
            rho_train: 0.95,
            rho_ood: 0.05,
            shortcut_rate: 0.7,
            min_len: 8,
            max_len: 14,
            content_min: 3,
            content_max: 6,
            genuine_strength: 0.55,
            function_word_rate: 0.25,
            ood_shift: 0.1,
            train_size: 10_000,
            dev_size: 1_000,
            ood_size: 1_000,
            seed: 17,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |msg: String| Err(DatasetError::Invalid(msg));
        if self.num_labels < 2 {
            return bad(format!("need at least 2 labels, got {}", self.num_labels));
        }
        if self.shortcut_pools.len() != self.num_labels || self.genuine_pools.len() != self.num_labels {
            return bad("one shortcut pool and one genuine pool per label required".into());
        }
        for (name, rho) in [("rho_train", self.rho_train), ("rho_ood", self.rho_ood)] {
            if !(0.0..=1.0).contains(&rho) {
                return bad(format!("{name} = {rho} outside [0, 1]"));
            }
        }
        for (name, rate) in [
            ("shortcut_rate", self.shortcut_rate),
            ("function_word_rate", self.function_word_rate),
            ("ood_shift", self.ood_shift),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(format!("{name} = {rate} outside [0, 1]"));
            }
        }
        if !(self.genuine_strength > 0.0 && self.genuine_strength <= 1.0) {
            return bad(format!(
                "genuine_strength = {} must lie in (0, 1]",
                self.genuine_strength
            ));
        }
        if self.genuine_pools.iter().any(Vec::is_empty) || self.shortcut_pools.iter().any(Vec::is_empty) {
            return bad("empty token pool".into());
        }
        if self.content_min == 0 || self.content_min > self.content_max {
            return bad("content word range must be non-empty and start at 1".into());
        }
        if self.min_len > self.max_len || self.max_len < self.content_max {
            return bad("sentence length range must cover the content words".into());
        }
        if self.filler.is_empty() {
            return bad("empty filler pool".into());
        }

        let mut shortcut = HashSet::new();
        for pool in &self.shortcut_pools {
            for t in pool {
                if !shortcut.insert(t.as_str()) {
                    return bad(format!("shortcut token {t:?} appears in more than one pool"));
                }
            }
        }
        let others = self
            .genuine_pools
            .iter()
            .flatten()
            .chain(&self.filler)
            .chain(&self.function_words)
            .chain(&self.ood_filler);
        for t in others {
            if shortcut.contains(t.as_str()) {
                return bad(format!("shortcut token {t:?} also appears as a content word"));
            }
        }
        Ok(())
    }

    /// Plurality label over genuine content words, if unique.
    pub fn genuine_label(&self, tokens: &[String]) -> Option<usize> {
        let mut counts = vec![0usize; self.num_labels];
        for t in tokens {
            if let Some(k) = self.genuine_pools.iter().position(|p| p.contains(t)) {
                counts[k] += 1;
            }
        }
        strict_plurality(&counts)
    }

    /// Label whose shortcut pool the first planted token belongs to.
    pub fn shortcut_label(&self, tokens: &[String]) -> Option<usize> {
        tokens
            .iter()
            .find_map(|t| self.shortcut_pools.iter().position(|p| p.contains(t)))
    }
}

fn strict_plurality(counts: &[usize]) -> Option<usize> {
    let best = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, c)| **c == best);
    let (k, _) = winners.next()?;
    if best == 0 || winners.next().is_some() {
        None
    } else {
        Some(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Dev,
    Ood,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Ood => 3,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Ood => "ood",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Corpus,
    pub dev: Corpus,
    pub ood: Corpus,
}

/// Deterministic in `spec` (seed included); each split has its own stream.
pub fn generate_corpus(spec: &ShortcutSpec) -> Result<Splits, DatasetError> {
    spec.validate()?;
    Ok(Splits {
        train: generate_split(spec, Split::Train, spec.train_size),
        dev: generate_split(spec, Split::Dev, spec.dev_size),
        ood: generate_split(spec, Split::Ood, spec.ood_size),
    })
}

fn generate_split(spec: &ShortcutSpec, split: Split, size: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream());
    let rho = if split == Split::Ood { spec.rho_ood } else { spec.rho_train };
    let examples = (0..size)
        .map(|_| {
            let label = rng.gen_range(0..spec.num_labels);
            let mut ex = sentence(spec, split, label, &mut rng);
            if rng.gen_bool(spec.shortcut_rate) {
                let pool_label = if rng.gen_bool(rho) {
                    label
                } else {
                    let other = rng.gen_range(0..spec.num_labels - 1);
                    if other >= label {
                        other + 1
                    } else {
                        other
                    }
                };
                let token = spec.shortcut_pools[pool_label].choose(&mut rng).unwrap().clone();
                let pos = rng.gen_range(0..=ex.len());
                ex.insert(pos, token);
                (label, ex, vec![pos])
            } else {
                (label, ex, vec![])
            }
        })
        .enumerate()
        .map(|(i, (label, tokens, shortcut_positions))| Example {
            id: format!("{}-{i:05}", split.prefix()),
            tokens,
            label,
            shortcut_positions,
        })
        .collect();
    Corpus { examples }
}

fn sentence(spec: &ShortcutSpec, split: Split, label: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let k = spec.num_labels;
    let content = loop {
        let n = rng.gen_range(spec.content_min..=spec.content_max);
        let mut counts = vec![0usize; k];
        let words: Vec<String> = (0..n)
            .map(|_| {
                let from = if rng.gen_bool(spec.genuine_strength) {
                    label
                } else {
                    let other = rng.gen_range(0..k - 1);
                    if other >= label {
                        other + 1
                    } else {
                        other
                    }
                };
                counts[from] += 1;
                spec.genuine_pools[from].choose(rng).unwrap().clone()
            })
            .collect();
        if strict_plurality(&counts) == Some(label) {
            break words;
        }
    };

    let len = rng.gen_range(spec.min_len.max(content.len())..=spec.max_len);
    let mut tokens = content;
    while tokens.len() < len {
        let word = if !spec.function_words.is_empty() && rng.gen_bool(spec.function_word_rate) {
            spec.function_words.choose(rng).unwrap()
        } else if split == Split::Ood && !spec.ood_filler.is_empty() && rng.gen_bool(spec.ood_shift) {
            spec.ood_filler.choose(rng).unwrap()
        } else {
            spec.filler.choose(rng).unwrap()
        };
        tokens.push(word.clone());
    }
    tokens.shuffle(rng);
    tokens
}
