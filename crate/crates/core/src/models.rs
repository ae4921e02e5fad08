//! The sentence classifier (used both as identification model and as the
//! debiased model) and the bias-only MLP.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{MASK, PAD};
use crate::tensor::{softmax, ParamSet, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input contains only padding")]
    AllPadding,
    #[error("token id {id} outside vocabulary of {vocab}")]
    InvalidToken { id: usize, vocab: usize },
    #[error("feature vector has length {actual}, expected {expected}")]
    WrongFeatureLength { expected: usize, actual: usize },
    #[error("label {label} outside {num_labels} labels")]
    InvalidLabel { label: usize, num_labels: usize },
    #[error("model has not been trained")]
    NotTrained,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Single-head self-attention with a residual, then a per-token ReLU layer.
    Attention,
    /// Per-token ReLU layer only.
    FeedForward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskEmbedding {
    /// MASK has its own trainable row.
    Learned,
    /// MASK row pinned to zero.
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub num_labels: usize,
    pub encoder: EncoderKind,
    pub mask_embedding: MaskEmbedding,
    /// Embedding rows start uniform in `±init_range`.
    pub init_range: f64,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn new(vocab_size: usize, num_labels: usize) -> Self {
        Self {
            vocab_size,
            dim: 64,
            num_labels,
            encoder: EncoderKind::Attention,
            mask_embedding: MaskEmbedding::Learned,
            init_range: 0.05,
            seed: 0,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-limit..=limit);
    }
    t
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, &[fan_in, fan_out], (6.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Tape handles for a model's parameters, in [`ParamSet`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Handles already on a tape, in [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn bind(params: &ParamSet, tape: &mut Tape, trainable: bool) -> BoundParams {
    let vars = params
        .iter()
        .map(|(_, t)| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    BoundParams { vars }
}

/// Tape nodes of one classifier forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Length-K vector.
    pub logits: Var,
    /// Length-d vector: the mean of `token_reps` rows.
    pub pooled: Var,
    /// `n × d`, one row per non-PAD token.
    pub token_reps: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutput {
    pub logits: Vec<f64>,
    pub pooled: Vec<f64>,
    /// `L × d` with zero rows at PAD positions.
    pub token_reps: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub config: ClassifierConfig,
    pub params: ParamSet,
    pub trained: bool,
}

const EMBEDDING: usize = 0;

impl ClassifierModel {
    pub fn new(config: ClassifierConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, k) = (config.vocab_size, config.dim, config.num_labels);
        let mut params = ParamSet::new();
        let mut embedding = uniform(&mut rng, &[v, d], config.init_range);
        for c in 0..d {
            embedding.data_mut()[PAD * d + c] = 0.0;
        }
        params.push("embedding", embedding);
        if config.encoder == EncoderKind::Attention {
            params.push("attn.query", xavier(&mut rng, d, d));
            params.push("attn.key", xavier(&mut rng, d, d));
            params.push("attn.value", xavier(&mut rng, d, d));
        }
        params.push("ff.weight", xavier(&mut rng, d, d));
        params.push("ff.bias", Tensor::zeros(&[d]));
        params.push("head.weight", xavier(&mut rng, d, k));
        params.push("head.bias", Tensor::zeros(&[k]));
        let mut model = Self {
            config,
            params,
            trained: false,
        };
        model.apply_constraints();
        model
    }

    /// Zeroes the classification head so every input gets uniform output.
    pub fn zero_head(&mut self) {
        let n = self.params.len();
        for i in [n - 2, n - 1] {
            self.params.get_mut(i).data_mut().fill(0.0);
        }
    }

    /// Re-pins constrained rows after an optimizer step.
    pub fn apply_constraints(&mut self) {
        if self.config.mask_embedding == MaskEmbedding::Zeros {
            let d = self.config.dim;
            self.params.get_mut(EMBEDDING).data_mut()[MASK * d..(MASK + 1) * d].fill(0.0);
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        bind(&self.params, tape, trainable)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), ModelError> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(ModelError::InvalidToken {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Forward from token ids. PAD ids are dropped before encoding, so they
    /// never influence attention or pooling.
    pub fn forward_ids(&self, tape: &mut Tape, bound: &BoundParams, ids: &[usize]) -> Result<ForwardVars, ModelError> {
        self.check_ids(ids)?;
        let real: Vec<usize> = ids.iter().copied().filter(|&t| t != PAD).collect();
        if real.is_empty() {
            return Err(ModelError::AllPadding);
        }
        let x = tape.gather(bound.vars[EMBEDDING], &real)?;
        self.forward_embedded(tape, bound, x)
    }

    /// Forward from an `n × d` embedding matrix of non-PAD tokens.
    pub fn forward_embedded(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<ForwardVars, ModelError> {
        let d = self.config.dim;
        if tape.value(x).shape().len() != 2 || tape.value(x).shape()[1] != d {
            return Err(TensorError::ShapeMismatch {
                op: "classifier_forward",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![0, d],
            }
            .into());
        }
        if tape.value(x).shape()[0] == 0 {
            return Err(ModelError::AllPadding);
        }
        let p = &bound.vars;
        let mut next = 1;
        let hidden = match self.config.encoder {
            EncoderKind::Attention => {
                let q = tape.matmul(x, p[1])?;
                let k = tape.matmul(x, p[2])?;
                let v = tape.matmul(x, p[3])?;
                next = 4;
                let scores = tape.matmul_t(q, k)?;
                let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
                let weights = tape.softmax_rows(scores)?;
                let context = tape.matmul(weights, v)?;
                tape.add(x, context)?
            }
            EncoderKind::FeedForward => x,
        };
        let pre = tape.matmul(hidden, p[next])?;
        let pre = tape.add_row_bias(pre, p[next + 1])?;
        let token_reps = tape.relu(pre)?;
        let pooled = tape.mean_rows(token_reps)?;
        let row = tape.reshape(pooled, &[1, d])?;
        let logits = tape.matmul(row, p[next + 2])?;
        let logits = tape.add_row_bias(logits, p[next + 3])?;
        let logits = tape.reshape(logits, &[self.config.num_labels])?;
        Ok(ForwardVars {
            logits,
            pooled,
            token_reps,
        })
    }

    /// Embedding rows of the non-PAD tokens, with their positions.
    pub fn embed(&self, ids: &[usize]) -> Result<(Tensor, Vec<usize>), ModelError> {
        self.check_ids(ids)?;
        let d = self.config.dim;
        let table = self.params.get(EMBEDDING);
        let positions: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] != PAD).collect();
        if positions.is_empty() {
            return Err(ModelError::AllPadding);
        }
        let mut data = Vec::with_capacity(positions.len() * d);
        for &p in &positions {
            data.extend_from_slice(table.row(ids[p]));
        }
        Ok((Tensor::matrix(positions.len(), d, data)?, positions))
    }

    pub fn classifier_forward(&self, ids: &[usize]) -> Result<ClassifierOutput, ModelError> {
        let (_, positions) = self.embed(ids)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward_ids(&mut tape, &bound, ids)?;
        let d = self.config.dim;
        let reps = tape.value(out.token_reps);
        let mut full = Tensor::zeros(&[ids.len(), d]);
        for (row, &p) in positions.iter().enumerate() {
            full.data_mut()[p * d..(p + 1) * d].copy_from_slice(reps.row(row));
        }
        Ok(ClassifierOutput {
            logits: tape.value(out.logits).data().to_vec(),
            pooled: tape.value(out.pooled).data().to_vec(),
            token_reps: full,
        })
    }

    pub fn predict_proba(&self, ids: &[usize]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward_ids(&mut tape, &bound, ids)?;
        Ok(softmax(tape.value(out.logits).data()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasOnlyConfig {
    /// `N × d`.
    pub input_dim: usize,
    pub hidden: usize,
    pub num_labels: usize,
    pub seed: u64,
}

impl BiasOnlyConfig {
    pub fn new(top_n: usize, dim: usize, num_labels: usize) -> Self {
        Self {
            input_dim: top_n * dim,
            hidden: 100,
            num_labels,
            seed: 0,
        }
    }
}

/// One hidden ReLU layer over concatenated top-N token representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasOnlyModel {
    pub config: BiasOnlyConfig,
    pub params: ParamSet,
}

impl BiasOnlyModel {
    pub fn new(config: BiasOnlyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        params.push("hidden.weight", xavier(&mut rng, config.input_dim, config.hidden));
        params.push("hidden.bias", Tensor::zeros(&[config.hidden]));
        params.push("out.weight", xavier(&mut rng, config.hidden, config.num_labels));
        params.push("out.bias", Tensor::zeros(&[config.num_labels]));
        Self { config, params }
    }

    /// All weights zero.
    pub fn zeroed(config: BiasOnlyConfig) -> Self {
        let mut model = Self::new(config);
        for i in 0..model.params.len() {
            model.params.get_mut(i).data_mut().fill(0.0);
        }
        model
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        bind(&self.params, tape, trainable)
    }

    /// Logits (length K) on the tape.
    pub fn forward_tape(&self, tape: &mut Tape, bound: &BoundParams, features: &[f64]) -> Result<Var, ModelError> {
        if features.len() != self.config.input_dim {
            return Err(ModelError::WrongFeatureLength {
                expected: self.config.input_dim,
                actual: features.len(),
            });
        }
        let p = &bound.vars;
        let x = tape.constant(Tensor::matrix(1, features.len(), features.to_vec())?);
        let h = tape.matmul(x, p[0])?;
        let h = tape.add_row_bias(h, p[1])?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, p[2])?;
        let o = tape.add_row_bias(o, p[3])?;
        Ok(tape.reshape(o, &[self.config.num_labels])?)
    }

    pub fn bias_only_forward(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let logits = self.forward_tape(&mut tape, &bound, features)?;
        Ok(softmax(tape.value(logits).data()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(encoder: EncoderKind) -> ClassifierModel {
        let mut cfg = ClassifierConfig::new(20, 3);
        cfg.dim = 8;
        cfg.encoder = encoder;
        cfg.seed = 3;
        ClassifierModel::new(cfg)
    }

    #[test]
    fn logits_are_finite_with_k_entries() {
        for enc in [EncoderKind::Attention, EncoderKind::FeedForward] {
            let m = model(enc);
            let out = m.classifier_forward(&[5, 6, 7, 19, PAD, PAD]).unwrap();
            assert_eq!(out.logits.len(), 3);
            assert!(out.logits.iter().all(|v| v.is_finite()));
            assert_eq!(out.pooled.len(), 8);
            assert_eq!(out.token_reps.shape(), &[6, 8]);
            assert!(out.token_reps.row(4).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn pad_tail_does_not_matter() {
        let m = model(EncoderKind::Attention);
        let a = m.predict_proba(&[5, 6, 7, PAD]).unwrap();
        let b = m.predict_proba(&[5, 6, 7, PAD, PAD, PAD, PAD]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_padding_is_rejected() {
        let m = model(EncoderKind::FeedForward);
        assert!(matches!(m.predict_proba(&[PAD, PAD]), Err(ModelError::AllPadding)));
    }

    #[test]
    fn zero_head_gives_uniform_output() {
        let mut m = model(EncoderKind::Attention);
        m.zero_head();
        let p = m.predict_proba(&[4, 9, 11]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn proba_normalized_and_consistent_with_logits() {
        let m = model(EncoderKind::Attention);
        let ids = [4, 8, 15, 16];
        let p = m.predict_proba(&ids).unwrap();
        let out = m.classifier_forward(&ids).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(crate::tensor::argmax(&p), crate::tensor::argmax(&out.logits));
    }

    #[test]
    fn bias_only_checks_length_and_normalizes() {
        let m = BiasOnlyModel::new(BiasOnlyConfig::new(3, 4, 3));
        let p = m.bias_only_forward(&[0.1; 12]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        match m.bias_only_forward(&[0.1; 11]) {
            Err(ModelError::WrongFeatureLength { expected, actual }) => {
                assert_eq!((expected, actual), (12, 11));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(BiasOnlyConfig::new(3, 64, 3).hidden, 100);
    }

    #[test]
    fn zeroed_bias_only_is_uniform() {
        let m = BiasOnlyModel::zeroed(BiasOnlyConfig::new(3, 4, 3));
        let p = m.bias_only_forward(&[0.0; 12]).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn zero_mask_embedding_stays_zero() {
        let mut cfg = ClassifierConfig::new(10, 2);
        cfg.dim = 4;
        cfg.mask_embedding = MaskEmbedding::Zeros;
        let m = ClassifierModel::new(cfg);
        let row = m.params.get(0).row(MASK);
        assert!(row.iter().all(|v| *v == 0.0));
    }
}
