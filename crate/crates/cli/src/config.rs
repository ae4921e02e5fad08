//! Run configuration: TOML with one table per pipeline stage, every key
//! optional. Precedence is `--set` override > file > default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use shortcut_core::dataset::{PoolSizes, ShortcutSpec};
use shortcut_core::models::{BiasOnlyConfig, ClassifierConfig, EncoderKind, MaskEmbedding};
use shortcut_core::shortcut::BiasTrainConfig;
use shortcut_core::tensor::OptimizerConfig;
use shortcut_core::training::losses::PoeForm;
use shortcut_core::training::{TrainConfig, Variant};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_labels: usize,
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub ood_size: usize,
    pub rho_train: f64,
    pub rho_ood: f64,
    pub shortcut_rate: f64,
    pub genuine_strength: f64,
    pub function_word_rate: f64,
    pub ood_shift: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub content_min: usize,
    pub content_max: usize,
    /// Encoded sequence length.
    pub max_seq_len: usize,
    pub shortcut_pool: usize,
    pub genuine_pool: usize,
    pub filler_pool: usize,
    pub function_words: usize,
    pub ood_filler_pool: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let sizes = PoolSizes::default();
        let spec = ShortcutSpec::new(3, &sizes);
        Self {
            num_labels: spec.num_labels,
            seed: spec.seed,
            train_size: spec.train_size,
            dev_size: spec.dev_size,
            ood_size: spec.ood_size,
            rho_train: spec.rho_train,
            rho_ood: spec.rho_ood,
            shortcut_rate: spec.shortcut_rate,
            genuine_strength: spec.genuine_strength,
            function_word_rate: spec.function_word_rate,
            ood_shift: spec.ood_shift,
            min_len: spec.min_len,
            max_len: spec.max_len,
            content_min: spec.content_min,
            content_max: spec.content_max,
            max_seq_len: 32,
            shortcut_pool: sizes.shortcut_per_label,
            genuine_pool: sizes.genuine_per_label,
            filler_pool: sizes.filler,
            function_words: sizes.function_words,
            ood_filler_pool: sizes.ood_filler,
        }
    }
}

impl DataConfig {
    pub fn spec(&self) -> ShortcutSpec {
        let sizes = PoolSizes {
            shortcut_per_label: self.shortcut_pool,
            genuine_per_label: self.genuine_pool,
            filler: self.filler_pool,
            function_words: self.function_words,
            ood_filler: self.ood_filler_pool,
        };
        let mut spec = ShortcutSpec::new(self.num_labels, &sizes);
        spec.seed = self.seed;
        spec.train_size = self.train_size;
        spec.dev_size = self.dev_size;
        spec.ood_size = self.ood_size;
        spec.rho_train = self.rho_train;
        spec.rho_ood = self.rho_ood;
        spec.shortcut_rate = self.shortcut_rate;
        spec.genuine_strength = self.genuine_strength;
        spec.function_word_rate = self.function_word_rate;
        spec.ood_shift = self.ood_shift;
        spec.min_len = self.min_len;
        spec.max_len = self.max_len;
        spec.content_min = self.content_min;
        spec.content_max = self.content_max;
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub encoder: EncoderKind,
    pub mask_embedding: MaskEmbedding,
    pub init_range: f64,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            dim: 64,
            encoder: EncoderKind::Attention,
            mask_embedding: MaskEmbedding::Learned,
            init_range: 0.05,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerChoice,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl TrainSection {
    fn new(epochs: usize, batch_size: usize) -> Self {
        Self {
            epochs,
            batch_size,
            optimizer: OptimizerChoice::Adam,
            learning_rate: 1e-3,
            momentum: 0.0,
            seed: 11,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerChoice::Adam => OptimizerConfig::adam(self.learning_rate),
            OptimizerChoice::Sgd => {
                let mut c = OptimizerConfig::sgd(self.learning_rate);
                if let shortcut_core::tensor::OptimizerKind::Sgd { momentum } = &mut c.kind {
                    *momentum = self.momentum;
                }
                c
            }
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::new(12, 32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSection {
    pub top_n: usize,
    pub ig_steps: usize,
}

impl Default for AttributionSection {
    fn default() -> Self {
        Self { top_n: 3, ig_steps: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasSection {
    pub hidden: usize,
    pub subset_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Batch size of the shortcut-degree normalization partition.
    pub degree_batch_size: usize,
}

impl Default for BiasSection {
    fn default() -> Self {
        Self {
            hidden: 100,
            subset_size: 2000,
            epochs: 1,
            batch_size: 18,
            learning_rate: 1e-3,
            seed: 13,
            degree_batch_size: 18,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebiasSection {
    /// Every listed variant is trained; the first is the headline model.
    pub variants: Vec<Variant>,
    pub lambda: f64,
    pub poe_form: PoeForm,
    /// Exclude the LMI-filtered words from masking.
    pub filtered: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerChoice,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl DebiasSection {
    pub fn train(&self) -> TrainSection {
        TrainSection {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            seed: self.seed,
        }
    }
}

impl Default for DebiasSection {
    fn default() -> Self {
        let t = TrainSection::new(12, 18);
        Self {
            variants: vec![Variant::DbrSoft],
            lambda: 1.5,
            poe_form: PoeForm::LogSpace,
            filtered: false,
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub lmi_top_k: usize,
    pub histogram_bins: usize,
    pub loss_threshold: f64,
    pub smoothing_window: usize,
    pub heatmap_examples: usize,
    /// Dev examples used for attribution-share statistics.
    pub attribution_sample: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            lmi_top_k: 10,
            histogram_bins: 20,
            loss_threshold: 0.5,
            smoothing_window: 20,
            heatmap_examples: 20,
            attribution_sample: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub identification: TrainSection,
    pub attribution: AttributionSection,
    pub bias: BiasSection,
    pub debias: DebiasSection,
    pub analysis: AnalysisSection,
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("override `{raw}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(LabError::Config(format!("bad key in override `{raw}`")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for key in parents {
        let entry = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| LabError::Config(format!("`{key}` is not a table")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            apply_override(&mut table, &path, value)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` if given, otherwise starts from defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| LabError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        self.data
            .spec()
            .validate()
            .map_err(|e| LabError::Config(e.to_string()))?;
        if self.data.max_seq_len == 0 {
            return bad("data.max_seq_len must be at least 1".into());
        }
        if self.model.dim == 0 {
            return bad("model.dim must be at least 1".into());
        }
        for (name, t) in [("identification", &self.identification), ("debias", &self.debias.train())] {
            if t.epochs == 0 || t.batch_size == 0 {
                return bad(format!("{name}: epochs and batch_size must be at least 1"));
            }
            if !(t.learning_rate > 0.0) {
                return bad(format!("{name}.learning_rate must be positive"));
            }
        }
        if self.bias.epochs == 0 || self.bias.batch_size == 0 || self.bias.degree_batch_size == 0 {
            return bad("bias: epochs and batch sizes must be at least 1".into());
        }
        if self.bias.subset_size == 0 || self.bias.hidden == 0 {
            return bad("bias.subset_size and bias.hidden must be at least 1".into());
        }
        if self.attribution.top_n == 0 || self.attribution.ig_steps == 0 {
            return bad("attribution.top_n and attribution.ig_steps must be at least 1".into());
        }
        if !(self.debias.lambda >= 0.0 && self.debias.lambda.is_finite()) {
            return bad(format!("debias.lambda = {} must be finite and non-negative", self.debias.lambda));
        }
        if self.debias.variants.is_empty() {
            return bad("debias.variants must list at least one variant".into());
        }
        if self.analysis.histogram_bins == 0 {
            return bad("analysis.histogram_bins must be at least 1".into());
        }
        Ok(())
    }

    /// Stable digest of one section, used to decide whether a stage is stale.
    pub fn section_hash<T: Serialize>(section: &T) -> String {
        let json = serde_json::to_string(section).expect("section serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }

    pub fn classifier_config(&self, vocab_size: usize) -> ClassifierConfig {
        ClassifierConfig {
            vocab_size,
            dim: self.model.dim,
            num_labels: self.data.num_labels,
            encoder: self.model.encoder,
            mask_embedding: self.model.mask_embedding,
            init_range: self.model.init_range,
            seed: self.model.seed,
        }
    }

    pub fn identification_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.identification.epochs,
            batch_size: self.identification.batch_size,
            optimizer: self.identification.optimizer_config(),
            seed: self.identification.seed,
            lambda: 0.0,
            variant: Variant::Standard,
            poe_form: PoeForm::LogSpace,
        }
    }

    pub fn debias_train(&self, variant: Variant) -> TrainConfig {
        let t = self.debias.train();
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: t.optimizer_config(),
            seed: t.seed,
            lambda: self.debias.lambda,
            variant,
            poe_form: self.debias.poe_form,
        }
    }

    pub fn bias_model_config(&self) -> BiasOnlyConfig {
        BiasOnlyConfig {
            input_dim: self.attribution.top_n * self.model.dim,
            hidden: self.bias.hidden,
            num_labels: self.data.num_labels,
            seed: self.bias.seed,
        }
    }

    pub fn bias_train(&self) -> BiasTrainConfig {
        BiasTrainConfig {
            epochs: self.bias.epochs,
            batch_size: self.bias.batch_size,
            optimizer: OptimizerConfig::adam(self.bias.learning_rate),
            seed: self.bias.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty() {
        let c = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.debias.lambda, 1.5);
        assert_eq!(c.attribution.top_n, 3);
        assert_eq!(c.bias.subset_size, 2000);
        assert_eq!((c.identification.epochs, c.identification.batch_size), (12, 32));
        assert_eq!((c.debias.epochs, c.debias.batch_size), (12, 18));
    }

    #[test]
    fn precedence_flag_over_file() {
        let text = "[debias]\nlambda = 3.0\n[data]\nseed = 5\n";
        let c = RunConfig::from_toml(text, &["debias.lambda=0.5".into()]).unwrap();
        assert_eq!(c.debias.lambda, 0.5);
        assert_eq!(c.data.seed, 5);
        let c = RunConfig::from_toml(text, &["debias.variants=[\"dbr-hard\", \"er\"]".into()]).unwrap();
        assert_eq!(c.debias.variants, vec![Variant::DbrHard, Variant::Er]);
        let c = RunConfig::from_toml("", &["model.encoder=feed-forward".into()]).unwrap();
        assert_eq!(c.model.encoder, EncoderKind::FeedForward);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in ["[debias]\nlambda = -1.0", "[data]\nrho_train = 1.5", "[nope]\nx = 1", "[data]\nbogus = 1"] {
            let e = RunConfig::from_toml(bad, &[]).unwrap_err();
            assert_eq!(e.exit_code(), crate::error::EXIT_CONFIG, "{bad}");
        }
        assert!(RunConfig::from_toml("", &["lambda".into()]).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml(), &[]).unwrap(), c);
    }
}
