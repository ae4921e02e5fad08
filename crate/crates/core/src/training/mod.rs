//! Minibatch training of the identification and debiased classifiers.

pub mod losses;

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EncodedExample;
use crate::masking::{soft_mask, MaskError};
use crate::models::{BoundParams, ClassifierConfig, ClassifierModel, ModelError};
use crate::shortcut::ShortcutProfile;
use crate::tensor::{argmax, Optimizer, OptimizerConfig, Tape, TensorError, Var};

use losses::{combined_loss_var, cross_entropy_var, er_loss_var, poe_loss_var, LossError, PoeForm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Plain cross-entropy.
    Standard,
    /// Always mask the top-N positions.
    DbrHard,
    /// Mask with probability equal to the shortcut degree.
    DbrSoft,
    /// Example reweighting by the bias-only confidence.
    Er,
    /// Product of experts with the bias-only model.
    Poe,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Self::Standard, Self::DbrHard, Self::DbrSoft, Self::Er, Self::Poe];

    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::DbrHard => "dbr-hard",
            Self::DbrSoft => "dbr-soft",
            Self::Er => "er",
            Self::Poe => "poe",
        }
    }

    pub fn needs_profiles(self) -> bool {
        self != Self::Standard
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Shuffle order and soft-mask draws.
    pub seed: u64,
    pub lambda: f64,
    pub variant: Variant,
    pub poe_form: PoeForm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(1e-3),
            seed: 0,
            lambda: 1.5,
            variant: Variant::Standard,
            poe_form: PoeForm::LogSpace,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub ce: f64,
    pub jsd: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the state before any update.
    pub epoch: usize,
    pub dev_accuracy: Option<f64>,
    pub ood_accuracy: Option<f64>,
    /// Share of examples whose input was masked this epoch.
    pub masked_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Kept apart from the records so they stay reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let lines = self
            .steps
            .iter()
            .map(LogLine::Step)
            .chain(self.epochs.iter().map(LogLine::Epoch));
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("log serializes"));
            out.push('\n');
        }
        out
    }

    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step} (epoch {epoch}): {reason}")]
    Diverged {
        step: usize,
        epoch: usize,
        reason: String,
        last_good: Box<ClassifierModel>,
        log: Box<TrainLog>,
    },
    #[error("no shortcut profile for example `{0}`")]
    MissingProfile(String),
    #[error("training set is empty")]
    EmptyTrain,
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("lambda must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalSets<'a> {
    pub dev: &'a [EncodedExample],
    pub ood: &'a [EncodedExample],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ClassifierModel,
    pub log: TrainLog,
}

/// Shortcut information the debiasing variants consume.
#[derive(Debug, Clone, Copy)]
pub struct DebiasPlan<'a> {
    pub profiles: &'a [ShortcutProfile],
    /// Token ids never masked (the filtered word list).
    pub excluded: &'a HashSet<usize>,
}

pub fn accuracy(model: &ClassifierModel, examples: &[EncodedExample]) -> Result<f64, ModelError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for ex in examples {
        if argmax(&model.predict_proba(&ex.ids)?) == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

fn epoch_record(model: &ClassifierModel, eval: EvalSets, epoch: usize, masked_fraction: f64) -> Result<EpochRecord, ModelError> {
    let acc = |set: &[EncodedExample]| -> Result<Option<f64>, ModelError> {
        if set.is_empty() {
            Ok(None)
        } else {
            accuracy(model, set).map(Some)
        }
    };
    Ok(EpochRecord {
        epoch,
        dev_accuracy: acc(eval.dev)?,
        ood_accuracy: acc(eval.ood)?,
        masked_fraction,
    })
}

/// Epoch order: one permutation per epoch, a function of seed and epoch only.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

struct ExampleLoss {
    total: Var,
    ce: f64,
    jsd: f64,
    masked: bool,
}

fn is_divergence(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Tensor(TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. })
            | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
            | TrainError::Loss(LossError::Tensor(TensorError::NonFinite { .. }))
    )
}

fn run<F>(
    model_config: ClassifierConfig,
    train: &[EncodedExample],
    eval: EvalSets,
    config: &TrainConfig,
    mut example_loss: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&ClassifierModel, &mut Tape, &BoundParams, &EncodedExample, usize) -> Result<ExampleLoss, TrainError>,
{
    if train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    if config.batch_size == 0 {
        return Err(TrainError::ZeroBatch);
    }
    if !config.lambda.is_finite() || config.lambda < 0.0 {
        return Err(TrainError::InvalidLambda(config.lambda));
    }
    let started = Instant::now();
    let mut model = ClassifierModel::new(model_config);
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut log = TrainLog::default();
    log.epochs.push(epoch_record(&model, eval, 0, 0.0)?);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut masked = 0usize;
        for batch in epoch_order(train.len(), config.seed, epoch).chunks(config.batch_size) {
            let attempt = (|| -> Result<(Vec<crate::tensor::Tensor>, StepRecord, usize), TrainError> {
                let mut grads = model.params.zeros_like();
                let (mut ce, mut jsd, mut total, mut n_masked) = (0.0, 0.0, 0.0, 0);
                for &i in batch {
                    let mut tape = Tape::new();
                    let bound = model.bind(&mut tape, true);
                    let l = example_loss(&model, &mut tape, &bound, &train[i], epoch)?;
                    ce += l.ce;
                    jsd += l.jsd;
                    total += tape.scalar(l.total);
                    n_masked += usize::from(l.masked);
                    let mut g = tape.backward(l.total)?;
                    for (acc, v) in grads.iter_mut().zip(bound.vars()) {
                        acc.add_assign(&g.take(*v))?;
                    }
                }
                let inv = 1.0 / batch.len() as f64;
                for g in &mut grads {
                    g.scale_in_place(inv);
                }
                let record = StepRecord {
                    step: step + 1,
                    epoch,
                    ce: ce * inv,
                    jsd: jsd * inv,
                    total: total * inv,
                };
                if !record.total.is_finite() {
                    return Err(TensorError::NonFinite {
                        op: "loss",
                        node: 0,
                    }
                    .into());
                }
                Ok((grads, record, n_masked))
            })();
            let (grads, record, n_masked) = match attempt {
                Ok(v) => v,
                Err(e) if is_divergence(&e) => return Err(diverged(step + 1, epoch, e, model, log)),
                Err(e) => return Err(e),
            };
            if let Err(e) = optimizer.step(&mut model.params, &grads) {
                return Err(diverged(step + 1, epoch, e.into(), model, log));
            }
            model.apply_constraints();
            step += 1;
            masked += n_masked;
            log.steps.push(record);
        }
        log.epochs
            .push(epoch_record(&model, eval, epoch, masked as f64 / train.len() as f64)?);
    }
    model.trained = true;
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { model, log })
}

fn diverged(step: usize, epoch: usize, e: TrainError, model: ClassifierModel, mut log: TrainLog) -> TrainError {
    let mut last_good = model;
    last_good.trained = true;
    log.wall_clock_secs = 0.0;
    TrainError::Diverged {
        step,
        epoch,
        reason: e.to_string(),
        last_good: Box::new(last_good),
        log: Box::new(log),
    }
}

/// Plain cross-entropy training.
pub fn train_identification(
    model_config: ClassifierConfig,
    train: &[EncodedExample],
    eval: EvalSets,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    run(model_config, train, eval, config, |model, tape, bound, ex, _| {
        let out = model.forward_ids(tape, bound, &ex.ids)?;
        let loss = cross_entropy_var(tape, out.logits, ex.label)?;
        let ce = tape.scalar(loss);
        Ok(ExampleLoss {
            total: loss,
            ce,
            jsd: 0.0,
            masked: false,
        })
    })
}

/// Trains with the variant in `config`, drawing shortcut information from `plan`.
pub fn train_debiased(
    model_config: ClassifierConfig,
    train: &[EncodedExample],
    plan: DebiasPlan,
    eval: EvalSets,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if config.variant == Variant::Standard {
        return train_identification(model_config, train, eval, config);
    }
    let by_id: HashMap<&str, &ShortcutProfile> = plan.profiles.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut mask_positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for ex in train {
        let profile = by_id
            .get(ex.id.as_str())
            .ok_or_else(|| TrainError::MissingProfile(ex.id.clone()))?;
        let positions = profile
            .top_n
            .iter()
            .copied()
            .filter(|&p| ex.ids.get(p).is_some_and(|t| !plan.excluded.contains(t)))
            .collect();
        mask_positions.insert(ex.id.as_str(), positions);
    }
    let variant = config.variant;
    let (lambda, seed, form) = (config.lambda, config.seed, config.poe_form);
    run(model_config, train, eval, config, |model, tape, bound, ex, epoch| {
        let profile = by_id[ex.id.as_str()];
        let orig = model.forward_ids(tape, bound, &ex.ids)?;
        match variant {
            Variant::DbrHard | Variant::DbrSoft => {
                let degree = if variant == Variant::DbrHard { 1.0 } else { profile.s2_hat };
                let positions = &mask_positions[ex.id.as_str()];
                let decision = soft_mask(&ex.ids, positions, degree, seed, epoch, &ex.id)?;
                let active = decision.masked && !positions.is_empty() && lambda != 0.0;
                let unbias = if active {
                    Some(model.forward_ids(tape, bound, &decision.ids)?.logits)
                } else {
                    None
                };
                let terms = combined_loss_var(tape, orig.logits, unbias, ex.label, lambda)?;
                Ok(ExampleLoss {
                    total: terms.total,
                    ce: terms.ce,
                    jsd: terms.jsd,
                    masked: decision.masked && !positions.is_empty(),
                })
            }
            Variant::Er => {
                let loss = er_loss_var(tape, &profile.p_bias, orig.logits, ex.label)?;
                let ce = losses::cross_entropy(tape.value(orig.logits).data(), ex.label)?;
                Ok(ExampleLoss {
                    total: loss,
                    ce,
                    jsd: 0.0,
                    masked: false,
                })
            }
            Variant::Poe => {
                let loss = poe_loss_var(tape, &profile.p_bias, orig.logits, ex.label, form)?;
                let ce = losses::cross_entropy(tape.value(orig.logits).data(), ex.label)?;
                Ok(ExampleLoss {
                    total: loss,
                    ce,
                    jsd: 0.0,
                    masked: false,
                })
            }
            Variant::Standard => unreachable!("handled above"),
        }
    })
}
