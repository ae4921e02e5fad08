//! Shortcut degree: how confidently a bias-only model, seeing nothing but the
//! top-N attributed token representations, predicts each example.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{BiasOnlyConfig, BiasOnlyModel, ClassifierModel, ModelError};
use crate::tensor::{Optimizer, OptimizerConfig, Tape, TensorError};
use crate::training::losses::{cross_entropy_var, LossError};

#[derive(Debug, Error)]
pub enum ShortcutError {
    #[error("variance needs at least two labels, got {0}")]
    TooFewLabels(usize),
    #[error("{features} feature vectors but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("no training examples")]
    Empty,
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Concatenated representations at `top_n`, zero-filled up to `n` slots.
pub fn build_bias_features(
    model: &ClassifierModel,
    ids: &[usize],
    top_n: &[usize],
    n: usize,
) -> Result<Vec<f64>, ShortcutError> {
    if !model.trained {
        return Err(ModelError::NotTrained.into());
    }
    let out = model.classifier_forward(ids)?;
    let d = model.config.dim;
    let mut features = vec![0.0; n * d];
    for (slot, &pos) in top_n.iter().take(n).enumerate() {
        features[slot * d..(slot + 1) * d].copy_from_slice(out.token_reps.row(pos));
    }
    Ok(features)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for BiasTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 18,
            optimizer: OptimizerConfig::adam(1e-3),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasTrainReport {
    /// How many times each training example was used.
    pub visits: Vec<usize>,
    /// Mean cross-entropy per step.
    pub losses: Vec<f64>,
    pub warnings: Vec<String>,
}

/// `size` distinct indices out of `0..total`, sorted; all of them when
/// `size >= total`.
pub fn select_subset(total: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    if size < total {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(size);
        idx.sort_unstable();
    }
    idx
}

pub fn train_bias_only(
    features: &[Vec<f64>],
    labels: &[usize],
    model_config: BiasOnlyConfig,
    config: &BiasTrainConfig,
) -> Result<(BiasOnlyModel, BiasTrainReport), ShortcutError> {
    if features.len() != labels.len() {
        return Err(ShortcutError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(ShortcutError::Empty);
    }
    if config.batch_size == 0 {
        return Err(ShortcutError::ZeroBatch);
    }
    let k = model_config.num_labels;
    let mut report = BiasTrainReport {
        visits: vec![0; features.len()],
        ..Default::default()
    };
    for label in 0..k {
        if !labels.contains(&label) {
            report.warnings.push(format!("label {label} absent from bias-only training subset"));
        }
    }
    let mut model = BiasOnlyModel::new(model_config);
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.params.zeros_like();
            let mut loss_sum = 0.0;
            for &i in batch {
                report.visits[i] += 1;
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, true);
                let logits = model.forward_tape(&mut tape, &bound, &features[i])?;
                let loss = cross_entropy_var(&mut tape, logits, labels[i])?;
                loss_sum += tape.scalar(loss);
                let mut g = tape.backward(loss)?;
                for (acc, v) in grads.iter_mut().zip(bound.vars()) {
                    acc.add_assign(&g.take(*v))?;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.scale_in_place(inv);
            }
            optimizer.step(&mut model.params, &grads)?;
            report.losses.push(loss_sum * inv);
        }
    }
    Ok((model, report))
}

/// Unbiased sample variance `Σ(p − p̄)² / (K − 1)`.
pub fn sample_variance(p: &[f64]) -> Result<f64, ShortcutError> {
    if p.len() < 2 {
        return Err(ShortcutError::TooFewLabels(p.len()));
    }
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    Ok(p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (p.len() - 1) as f64)
}

/// Min-max normalization; a batch with no spread maps to all zeros.
pub fn normalize_batch(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - min) / range).clamp(0.0, 1.0)).collect()
}

/// Per-example shortcut record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortcutProfile {
    pub id: String,
    pub top_n: Vec<usize>,
    pub p_bias: Vec<f64>,
    pub s2: f64,
    pub s2_hat: f64,
    /// Index of the normalization batch the example fell into.
    pub batch: usize,
}

/// Fixed seeded partition of `0..total` into batches; the last one may be short.
pub fn degree_batches(total: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Profiles in input order. `items` holds `(id, top_n, features)`.
pub fn compute_profiles(
    bias: &BiasOnlyModel,
    items: &[(String, Vec<usize>, Vec<f64>)],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<ShortcutProfile>, ShortcutError> {
    if batch_size == 0 {
        return Err(ShortcutError::ZeroBatch);
    }
    let mut profiles = Vec::with_capacity(items.len());
    for (id, top_n, features) in items {
        let p_bias = bias.bias_only_forward(features)?;
        let s2 = sample_variance(&p_bias)?;
        profiles.push(ShortcutProfile {
            id: id.clone(),
            top_n: top_n.clone(),
            p_bias,
            s2,
            s2_hat: 0.0,
            batch: 0,
        });
    }
    for (b, members) in degree_batches(items.len(), batch_size, seed).iter().enumerate() {
        let values: Vec<f64> = members.iter().map(|&i| profiles[i].s2).collect();
        for (&i, s) in members.iter().zip(normalize_batch(&values)) {
            profiles[i].s2_hat = s;
            profiles[i].batch = b;
        }
    }
    Ok(profiles)
}

pub fn save_profiles(path: &Path, profiles: &[ShortcutProfile]) -> Result<(), ShortcutError> {
    let io = |source| ShortcutError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for p in profiles {
        let line = serde_json::to_string(p).expect("profile serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_profiles(path: &Path) -> Result<Vec<ShortcutProfile>, ShortcutError> {
    let shown = path.display().to_string();
    let io = |source| ShortcutError::Io {
        path: shown.clone(),
        source,
    };
    let r = BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let p: ShortcutProfile = serde_json::from_str(&line).map_err(|e| ShortcutError::Malformed {
            path: shown.clone(),
            line: n + 1,
            reason: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&p.s2_hat) {
            return Err(ShortcutError::Malformed {
                path: shown.clone(),
                line: n + 1,
                reason: format!("s2_hat {} outside [0, 1]", p.s2_hat),
            });
        }
        out.push(p);
    }
    Ok(out)
}

/// Mean and standard deviation of a set of per-example values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_examples() {
        assert_eq!(sample_variance(&[1.0 / 3.0; 3]).unwrap(), 0.0);
        assert!((sample_variance(&[1.0, 0.0, 0.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((sample_variance(&[0.5, 0.5, 0.0]).unwrap() - 1.0 / 12.0).abs() < 1e-15);
        assert!(matches!(sample_variance(&[1.0]), Err(ShortcutError::TooFewLabels(1))));
    }

    #[test]
    fn normalize_examples() {
        let v = normalize_batch(&[0.1, 0.2, 0.4]);
        assert_eq!((v[0], v[2]), (0.0, 1.0));
        assert!((v[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(normalize_batch(&[0.2, 0.2]), vec![0.0, 0.0]);
        assert_eq!(normalize_batch(&[0.7]), vec![0.0]);
    }

    #[test]
    fn zeroed_bias_model_gives_uniform() {
        let m = BiasOnlyModel::zeroed(BiasOnlyConfig::new(2, 3, 3));
        let p = m.bias_only_forward(&[0.5; 6]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(sample_variance(&p).unwrap() < 1e-30);
    }

    #[test]
    fn untrained_identification_model_rejected() {
        let mut cfg = crate::models::ClassifierConfig::new(10, 3);
        cfg.dim = 4;
        let m = ClassifierModel::new(cfg);
        assert!(matches!(
            build_bias_features(&m, &[4, 5], &[0], 1),
            Err(ShortcutError::Model(ModelError::NotTrained))
        ));
    }

    #[test]
    fn features_zero_fill_missing_slots() {
        let mut cfg = crate::models::ClassifierConfig::new(10, 3);
        cfg.dim = 4;
        let mut m = ClassifierModel::new(cfg);
        m.trained = true;
        let f = build_bias_features(&m, &[4, 5], &[1], 3).unwrap();
        assert_eq!(f.len(), 12);
        assert!(f[4..].iter().all(|v| *v == 0.0));
        let reps = m.classifier_forward(&[4, 5]).unwrap().token_reps;
        assert_eq!(&f[..4], reps.row(1));
    }

    #[test]
    fn one_epoch_visits_each_example_once() {
        let features: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 40.0, 1.0]).collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let cfg = BiasOnlyConfig {
            input_dim: 2,
            hidden: 4,
            num_labels: 3,
            seed: 1,
        };
        let (_, report) = train_bias_only(&features, &labels, cfg, &BiasTrainConfig::default()).unwrap();
        assert!(report.visits.iter().all(|v| *v == 1));
        assert_eq!(report.losses.len(), 3);
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn batches_partition_everything() {
        let b = degree_batches(40, 18, 5);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![18, 18, 4]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn subset_is_distinct_and_bounded() {
        let s = select_subset(100, 30, 2);
        assert_eq!(s.len(), 30);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(select_subset(5, 30, 2), vec![0, 1, 2, 3, 4]);
    }
}
