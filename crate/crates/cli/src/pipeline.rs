//! The six resumable stages and the run directory they share.
//!
//! A stage is skipped when the manifest shows it completed under the same
//! config section, every input still hashes to what it consumed, and every
//! output still hashes to what it produced. Changed inputs or config re-run
//! the stage. A derived artifact whose bytes changed behind the manifest's
//! back is refused. The corpus files are the exception: they may be edited
//! by hand, and the edit propagates downstream.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use shortcut_core::analysis::{
    confidence_histogram, evaluate, filtered_word_list, heatmap_export, loss_curve_report, top_lmi_table, Histogram,
    LmiRow, LmiTable, LossCurveReport, Metrics,
};
use shortcut_core::attribution::{identify_shortcuts, top1_share};
use shortcut_core::dataset::{build_vocabulary, encode_corpus, generate_corpus, Corpus, EncodedExample, Vocabulary};
use shortcut_core::models::{BiasOnlyModel, ClassifierModel};
use shortcut_core::shortcut::{
    build_bias_features, compute_profiles, load_profiles, mean_std, save_profiles, select_subset, train_bias_only,
    ShortcutProfile,
};
use shortcut_core::tensor::argmax;
use shortcut_core::training::{
    train_debiased, train_identification, DebiasPlan, EvalSets, TrainError, TrainLog, TrainOutcome, Variant,
};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{LabError, Result};
use crate::manifest::{file_hash, Failure, Manifest, RunLock, StageRecord};
use crate::report::{BiasOnlyReport, DegreeReport, ModelReport, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenData,
    TrainId,
    ExtractShortcuts,
    TrainBias,
    TrainDebias,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Self::GenData,
        Self::TrainId,
        Self::ExtractShortcuts,
        Self::TrainBias,
        Self::TrainDebias,
        Self::Analyze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::TrainId => "train-id",
            Self::ExtractShortcuts => "extract-shortcuts",
            Self::TrainBias => "train-bias",
            Self::TrainDebias => "train-debias",
            Self::Analyze => "analyze",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Executed,
    Skipped,
}

pub const TRAIN: &str = "data/train.jsonl";
pub const DEV: &str = "data/dev.jsonl";
pub const OOD: &str = "data/ood.jsonl";
pub const VOCAB: &str = "data/vocab.txt";
pub const ID_CKPT: &str = "checkpoints/identification.ckpt";
pub const ID_LOG: &str = "logs/identification.jsonl";
pub const TOP_N: &str = "shortcuts/top_n.jsonl";
pub const BIAS_CKPT: &str = "checkpoints/bias-only.ckpt";
pub const PROFILES: &str = "shortcuts/profiles.jsonl";
pub const BIAS_REPORT: &str = "reports/bias_only.json";
pub const REPORT: &str = "reports/report.json";
pub const SUMMARY: &str = "reports/summary.md";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";

const CORPUS_FILES: [&str; 3] = [TRAIN, DEV, OOD];

pub fn debiased_ckpt(v: Variant) -> String {
    format!("checkpoints/debiased-{}.ckpt", v.name())
}

pub fn debiased_log(v: Variant) -> String {
    format!("logs/debiased-{}.jsonl", v.name())
}

/// Per-example top-N selection from the identification model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopNRecord {
    pub id: String,
    pub top_n: Vec<usize>,
    pub norms: Vec<f64>,
}

struct Data {
    vocab: Vocabulary,
    train: Vec<EncodedExample>,
    dev: Vec<EncodedExample>,
    ood: Vec<EncodedExample>,
}

pub struct Pipeline {
    dir: PathBuf,
    config: RunConfig,
    manifest: Manifest,
    _lock: RunLock,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializes") + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("serializes"));
        text.push('\n');
    }
    write_text(path, &text)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LabError::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

impl Pipeline {
    /// Claims `dir` (creating it) and snapshots `config` into it.
    pub fn open(dir: &Path, config: RunConfig) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let lock = RunLock::acquire(dir)?;
        let manifest = Manifest::load_or_default(&dir.join(MANIFEST))?;
        write_text(&dir.join(CONFIG), &config.to_toml())?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            manifest,
            _lock: lock,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn inputs(&self, stage: Stage) -> Vec<String> {
        let mut v: Vec<String> = match stage {
            Stage::GenData => vec![],
            Stage::TrainId => vec![TRAIN, DEV, OOD, VOCAB].into_iter().map(String::from).collect(),
            Stage::ExtractShortcuts => vec![TRAIN.into(), VOCAB.into(), ID_CKPT.into()],
            Stage::TrainBias => vec![TRAIN.into(), DEV.into(), VOCAB.into(), ID_CKPT.into(), TOP_N.into()],
            Stage::TrainDebias => vec![
                TRAIN.into(),
                DEV.into(),
                OOD.into(),
                VOCAB.into(),
                TOP_N.into(),
                PROFILES.into(),
            ],
            Stage::Analyze => {
                let mut v: Vec<String> = [TRAIN, DEV, OOD, VOCAB, ID_CKPT, ID_LOG, TOP_N, PROFILES, BIAS_REPORT]
                    .into_iter()
                    .map(String::from)
                    .collect();
                for &variant in &self.config.debias.variants {
                    v.push(debiased_ckpt(variant));
                    v.push(debiased_log(variant));
                }
                v
            }
        };
        v.sort();
        v
    }

    fn config_hash(&self, stage: Stage) -> String {
        let c = &self.config;
        match stage {
            Stage::GenData => RunConfig::section_hash(&c.data),
            Stage::TrainId => RunConfig::section_hash(&(c.data.max_seq_len, &c.model, &c.identification)),
            Stage::ExtractShortcuts => RunConfig::section_hash(&(c.data.max_seq_len, &c.attribution)),
            Stage::TrainBias => RunConfig::section_hash(&(c.data.max_seq_len, &c.attribution, &c.bias)),
            Stage::TrainDebias => RunConfig::section_hash(&(
                c.data.max_seq_len,
                &c.model,
                &c.debias,
                c.analysis.lmi_top_k,
            )),
            Stage::Analyze => RunConfig::section_hash(&(c.data.max_seq_len, &c.attribution, &c.analysis)),
        }
    }

    fn hash_all(&self, rels: &[String]) -> Result<BTreeMap<String, String>> {
        rels.iter()
            .map(|r| {
                let p = self.path(r);
                if !p.exists() {
                    return Err(LabError::Stage {
                        stage: "inputs".into(),
                        message: format!("missing {r}; run the upstream stage first"),
                    });
                }
                Ok((r.clone(), file_hash(&p)?))
            })
            .collect()
    }

    /// Whether `stage` can be skipped. Errors on tampered derived outputs.
    fn is_fresh(&mut self, stage: Stage) -> Result<bool> {
        let Some(record) = self.manifest.stages.get(stage.name()).cloned() else {
            return Ok(false);
        };
        if record.config_hash != self.config_hash(stage) {
            return Ok(false);
        }
        for (rel, hash) in &record.inputs {
            let p = self.path(rel);
            if !p.exists() || file_hash(&p)? != *hash {
                return Ok(false);
            }
        }
        let mut corpus_edited = false;
        for (rel, hash) in &record.outputs {
            let p = self.path(rel);
            if !p.exists() {
                return Ok(false);
            }
            if file_hash(&p)? != *hash {
                if stage == Stage::GenData && CORPUS_FILES.contains(&rel.as_str()) {
                    corpus_edited = true;
                    continue;
                }
                return Err(LabError::Stale {
                    path: p,
                    reason: format!("content differs from what stage `{}` recorded", stage.name()),
                });
            }
        }
        if corpus_edited {
            self.adopt_edited_corpus()?;
        }
        Ok(true)
    }

    /// Accepts hand-edited corpus files: rebuilds the vocabulary from them and
    /// records their new hashes so downstream stages see changed inputs.
    fn adopt_edited_corpus(&mut self) -> Result<()> {
        let corpora = CORPUS_FILES
            .iter()
            .map(|r| Corpus::load(&self.path(r)).map_err(|e| LabError::stage("gen-data", e)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Corpus> = corpora.iter().collect();
        build_vocabulary(&refs)
            .save(&self.path(VOCAB))
            .map_err(|e| LabError::stage("gen-data", e))?;
        let outputs = self.hash_all(&[TRAIN, DEV, OOD, VOCAB].map(String::from))?;
        self.manifest
            .stages
            .get_mut(Stage::GenData.name())
            .expect("record exists")
            .outputs = outputs;
        self.save_manifest()
    }

    fn save_manifest(&self) -> Result<()> {
        self.manifest.save(&self.path(MANIFEST))
    }

    /// Runs `stages` in pipeline order, skipping fresh ones unless `force`.
    pub fn run(&mut self, stages: &[Stage], force: bool) -> Result<Vec<(Stage, StageStatus)>> {
        let mut ordered = stages.to_vec();
        ordered.sort();
        ordered.dedup();
        let c = &self.config;
        self.manifest.seeds = BTreeMap::from([
            ("data".to_string(), c.data.seed),
            ("model".to_string(), c.model.seed),
            ("identification".to_string(), c.identification.seed),
            ("bias".to_string(), c.bias.seed),
            ("debias".to_string(), c.debias.seed),
        ]);
        let mut out = Vec::new();
        for stage in ordered {
            if !force && self.is_fresh(stage)? {
                out.push((stage, StageStatus::Skipped));
                continue;
            }
            self.manifest.failure = None;
            let inputs = self.inputs(stage);
            let result = self.hash_all(&inputs).and_then(|consumed| {
                let produced = self.execute(stage)?;
                Ok((consumed, produced))
            });
            match result {
                Ok((consumed, produced)) => {
                    let outputs = self.hash_all(&produced)?;
                    self.manifest.stages.insert(
                        stage.name().to_string(),
                        StageRecord {
                            config_hash: self.config_hash(stage),
                            inputs: consumed,
                            outputs,
                        },
                    );
                    self.save_manifest()?;
                    out.push((stage, StageStatus::Executed));
                }
                Err(e) => {
                    let e = match e {
                        LabError::Stage { message, .. } => LabError::Stage {
                            stage: stage.name().to_string(),
                            message,
                        },
                        other => other,
                    };
                    self.manifest.stages.remove(stage.name());
                    self.manifest.failure = Some(Failure {
                        stage: stage.name().to_string(),
                        error: e.to_string(),
                    });
                    self.save_manifest()?;
                    return Err(e);
                }
            }
        }
        Ok(out)
    }

    fn execute(&self, stage: Stage) -> Result<Vec<String>> {
        match stage {
            Stage::GenData => self.gen_data(),
            Stage::TrainId => self.train_id(),
            Stage::ExtractShortcuts => self.extract_shortcuts(),
            Stage::TrainBias => self.train_bias(),
            Stage::TrainDebias => self.train_debias(),
            Stage::Analyze => self.analyze(),
        }
    }

    fn gen_data(&self) -> Result<Vec<String>> {
        let splits = generate_corpus(&self.config.data.spec()).map_err(|e| LabError::stage("gen-data", e))?;
        std::fs::create_dir_all(self.path("data")).map_err(|e| LabError::io(self.path("data"), e))?;
        for (rel, corpus) in [(TRAIN, &splits.train), (DEV, &splits.dev), (OOD, &splits.ood)] {
            corpus.save(&self.path(rel)).map_err(|e| LabError::stage("gen-data", e))?;
        }
        build_vocabulary(&[&splits.train, &splits.dev, &splits.ood])
            .save(&self.path(VOCAB))
            .map_err(|e| LabError::stage("gen-data", e))?;
        Ok([TRAIN, DEV, OOD, VOCAB].map(String::from).to_vec())
    }

    fn load_data(&self, stage: &str) -> Result<Data> {
        let fail = |e: shortcut_core::dataset::DatasetError| LabError::stage(stage, e);
        let vocab = Vocabulary::load(&self.path(VOCAB)).map_err(fail)?;
        let k = self.config.data.num_labels;
        let enc = |rel: &str| -> Result<Vec<EncodedExample>> {
            let corpus = Corpus::load(&self.path(rel)).map_err(fail)?;
            if let Some(ex) = corpus.examples.iter().find(|e| e.label >= k) {
                return Err(LabError::stage(
                    stage,
                    format!("{rel}: example `{}` has label {} but there are {k} labels", ex.id, ex.label),
                ));
            }
            encode_corpus(&corpus, &vocab, self.config.data.max_seq_len).map_err(fail)
        };
        Ok(Data {
            train: enc(TRAIN)?,
            dev: enc(DEV)?,
            ood: enc(OOD)?,
            vocab,
        })
    }

    fn load_classifier(&self, rel: &str, vocab: &Vocabulary) -> Result<ClassifierModel> {
        let path = self.path(rel);
        load_classifier_checked(&path, vocab)
    }

    fn save_outcome(&self, outcome: &TrainOutcome, ckpt: &str, log: &str, vocab: &Vocabulary) -> Result<()> {
        std::fs::create_dir_all(self.path("checkpoints")).map_err(|e| LabError::io(self.path("checkpoints"), e))?;
        Checkpoint::classifier(&outcome.model, &vocab.content_hash()).save(&self.path(ckpt))?;
        write_text(&self.path(log), &outcome.log.to_jsonl())
    }

    fn training_failure(&self, stage: &str, ckpt: &str, e: TrainError, vocab: &Vocabulary) -> LabError {
        if let TrainError::Diverged { last_good, .. } = &e {
            let rescue = self.path(&ckpt.replace(".ckpt", ".last-good.ckpt"));
            let _ = std::fs::create_dir_all(self.path("checkpoints"));
            let _ = Checkpoint::classifier(last_good, &vocab.content_hash()).save(&rescue);
        }
        LabError::stage(stage, e)
    }

    fn train_id(&self) -> Result<Vec<String>> {
        let data = self.load_data("train-id")?;
        let eval = EvalSets {
            dev: &data.dev,
            ood: &data.ood,
        };
        let outcome = train_identification(
            self.config.classifier_config(data.vocab.len()),
            &data.train,
            eval,
            &self.config.identification_train(),
        )
        .map_err(|e| self.training_failure("train-id", ID_CKPT, e, &data.vocab))?;
        self.save_outcome(&outcome, ID_CKPT, ID_LOG, &data.vocab)?;
        Ok(vec![ID_CKPT.into(), ID_LOG.into()])
    }

    fn extract_shortcuts(&self) -> Result<Vec<String>> {
        let data = self.load_data("extract-shortcuts")?;
        let model = self.load_classifier(ID_CKPT, &data.vocab)?;
        let a = &self.config.attribution;
        let none = HashSet::new();
        let rows = data
            .train
            .iter()
            .map(|ex| {
                let r = identify_shortcuts(&model, &ex.ids, ex.label, a.ig_steps, a.top_n, &none)
                    .map_err(|e| LabError::stage("extract-shortcuts", format!("{}: {e}", ex.id)))?;
                Ok(TopNRecord {
                    id: ex.id.clone(),
                    top_n: r.selected,
                    norms: r.norms[..ex.len].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_jsonl(&self.path(TOP_N), &rows)?;
        Ok(vec![TOP_N.into()])
    }

    fn train_bias(&self) -> Result<Vec<String>> {
        let data = self.load_data("train-bias")?;
        let model = self.load_classifier(ID_CKPT, &data.vocab)?;
        let top: Vec<TopNRecord> = read_jsonl(&self.path(TOP_N))?;
        check_alignment("train-bias", &data.train, &top)?;
        let n = self.config.attribution.top_n;
        let items = data
            .train
            .iter()
            .zip(&top)
            .map(|(ex, t)| {
                let f = build_bias_features(&model, &ex.ids, &t.top_n, n).map_err(|e| LabError::stage("train-bias", e))?;
                Ok((ex.id.clone(), t.top_n.clone(), f))
            })
            .collect::<Result<Vec<_>>>()?;
        let b = &self.config.bias;
        let subset = select_subset(items.len(), b.subset_size, b.seed);
        let features: Vec<Vec<f64>> = subset.iter().map(|&i| items[i].2.clone()).collect();
        let labels: Vec<usize> = subset.iter().map(|&i| data.train[i].label).collect();
        let (bias, train_report) =
            train_bias_only(&features, &labels, self.config.bias_model_config(), &self.config.bias_train())
                .map_err(|e| LabError::stage("train-bias", e))?;
        let profiles = compute_profiles(&bias, &items, b.degree_batch_size, b.seed).map_err(|e| LabError::stage("train-bias", e))?;
        Checkpoint::bias_only(&bias, &data.vocab.content_hash()).save(&self.path(BIAS_CKPT))?;
        std::fs::create_dir_all(self.path("shortcuts")).map_err(|e| LabError::io(self.path("shortcuts"), e))?;
        save_profiles(&self.path(PROFILES), &profiles).map_err(|e| LabError::stage("train-bias", e))?;

        let holdout = bias_holdout(&model, &bias, &data.dev, &self.config).map_err(|e| LabError::stage("train-bias", e))?;
        let (mut sc, mut clean) = (Vec::new(), Vec::new());
        for (p, ex) in profiles.iter().zip(&data.train) {
            if ex.shortcut_positions.is_empty() {
                clean.push(p.s2_hat);
            } else {
                sc.push(p.s2_hat);
            }
        }
        let hits = data
            .train
            .iter()
            .zip(&top)
            .filter(|(ex, _)| !ex.shortcut_positions.is_empty())
            .filter(|(ex, t)| ex.shortcut_positions.iter().any(|p| t.top_n.contains(p)))
            .count();
        let report = BiasOnlyReport {
            subset_size: subset.len(),
            visits_per_example: train_report.visits.iter().copied().max().unwrap_or(0),
            warnings: train_report.warnings,
            holdout_examples: holdout.1,
            holdout_accuracy: if holdout.1 == 0 { 0.0 } else { holdout.0 as f64 / holdout.1 as f64 },
            degree: DegreeReport {
                mean_s2_hat_shortcut: mean_std(&sc).0,
                mean_s2_hat_clean: mean_std(&clean).0,
                identification_precision: if sc.is_empty() { 0.0 } else { hits as f64 / sc.len() as f64 },
            },
        };
        write_json(&self.path(BIAS_REPORT), &report)?;
        Ok(vec![BIAS_CKPT.into(), PROFILES.into(), BIAS_REPORT.into()])
    }

    fn lmi_table(&self, data: &Data, top: &[TopNRecord]) -> Result<LmiTable> {
        let occurrences: Vec<(String, usize)> = data
            .train
            .iter()
            .zip(top)
            .flat_map(|(ex, t)| {
                t.top_n
                    .iter()
                    .map(|&p| (data.vocab.token(ex.ids[p]).unwrap_or("[UNK]").to_string(), ex.label))
                    .collect::<Vec<_>>()
            })
            .collect();
        top_lmi_table(&occurrences, self.config.data.num_labels, None).map_err(|e| LabError::stage("lmi", e))
    }

    fn train_debias(&self) -> Result<Vec<String>> {
        let data = self.load_data("train-debias")?;
        let profiles: Vec<ShortcutProfile> = load_profiles(&self.path(PROFILES)).map_err(|e| LabError::stage("train-debias", e))?;
        let excluded: HashSet<usize> = if self.config.debias.filtered {
            let top: Vec<TopNRecord> = read_jsonl(&self.path(TOP_N))?;
            check_alignment("train-debias", &data.train, &top)?;
            let table = self.lmi_table(&data, &top)?;
            filtered_word_list(&table, self.config.analysis.lmi_top_k)
                .iter()
                .map(|w| data.vocab.id(w))
                .collect()
        } else {
            HashSet::new()
        };
        let plan = DebiasPlan {
            profiles: &profiles,
            excluded: &excluded,
        };
        let eval = EvalSets {
            dev: &data.dev,
            ood: &data.ood,
        };
        let mut produced = Vec::new();
        for &variant in &self.config.debias.variants {
            let (ckpt, log) = (debiased_ckpt(variant), debiased_log(variant));
            let outcome = train_debiased(
                self.config.classifier_config(data.vocab.len()),
                &data.train,
                plan,
                eval,
                &self.config.debias_train(variant),
            )
            .map_err(|e| self.training_failure("train-debias", &ckpt, e, &data.vocab))?;
            self.save_outcome(&outcome, &ckpt, &log, &data.vocab)?;
            produced.push(ckpt);
            produced.push(log);
        }
        Ok(produced)
    }

    fn model_report(&self, name: &str, model: &ClassifierModel, log: &TrainLog, data: &Data) -> Result<ModelReport> {
        let an = &self.config.analysis;
        let a = &self.config.attribution;
        let dev: Metrics = evaluate(model, &data.dev).map_err(|e| LabError::stage("analyze", e))?;
        let ood: Metrics = evaluate(model, &data.ood).map_err(|e| LabError::stage("analyze", e))?;
        let confidence: Histogram = confidence_histogram(model, &data.dev, an.histogram_bins).map_err(|e| LabError::stage("analyze", e))?;
        let none = HashSet::new();
        let sample: Vec<&EncodedExample> = data.dev.iter().take(an.attribution_sample).collect();
        let mut share = 0.0;
        for ex in &sample {
            let r = identify_shortcuts(model, &ex.ids, ex.label, a.ig_steps, a.top_n, &none).map_err(|e| LabError::stage("analyze", e))?;
            share += top1_share(&r.norms);
        }
        let curve = loss_curve_report(&[(name, log)], an.loss_threshold, an.smoothing_window);
        Ok(ModelReport {
            name: name.to_string(),
            dev,
            ood,
            confidence,
            top1_share: if sample.is_empty() { 0.0 } else { share / sample.len() as f64 },
            steps_to_threshold: curve.series[0].steps_to_threshold,
            steps: log.steps.len(),
        })
    }

    fn analyze(&self) -> Result<Vec<String>> {
        let data = self.load_data("analyze")?;
        let id_model = self.load_classifier(ID_CKPT, &data.vocab)?;
        let id_log = read_log(&self.path(ID_LOG))?;
        let identification = self.model_report("identification", &id_model, &id_log, &data)?;

        let mut variants = Vec::new();
        let mut logs = vec![("identification".to_string(), id_log)];
        let mut headline: Option<ClassifierModel> = None;
        for &variant in &self.config.debias.variants {
            let model = self.load_classifier(&debiased_ckpt(variant), &data.vocab)?;
            let log = read_log(&self.path(&debiased_log(variant)))?;
            variants.push(self.model_report(variant.name(), &model, &log, &data)?);
            logs.push((variant.name().to_string(), log));
            headline.get_or_insert(model);
        }

        let top: Vec<TopNRecord> = read_jsonl(&self.path(TOP_N))?;
        check_alignment("analyze", &data.train, &top)?;
        let table = self.lmi_table(&data, &top)?;
        let filtered: Vec<String> = filtered_word_list(&table, self.config.analysis.lmi_top_k).into_iter().collect();
        write_text(&self.path("reports/lmi.tsv"), &table.to_tsv())?;
        write_text(&self.path("reports/filtered_words.txt"), &filtered.iter().map(|w| format!("{w}\n")).collect::<String>())?;

        let an = &self.config.analysis;
        let log_refs: Vec<(&str, &TrainLog)> = logs.iter().map(|(n, l)| (n.as_str(), l)).collect();
        let curves: LossCurveReport = loss_curve_report(&log_refs, an.loss_threshold, an.smoothing_window);
        write_json(&self.path("reports/loss_curves.json"), &curves)?;

        let a = &self.config.attribution;
        let none = HashSet::new();
        let mut rows = Vec::new();
        for ex in data.dev.iter().take(an.heatmap_examples) {
            let tokens: Vec<String> = ex
                .tokens()
                .iter()
                .map(|&t| data.vocab.token(t).unwrap_or("[UNK]").to_string())
                .collect();
            let mut models = vec![("identification", &id_model)];
            if let Some(h) = &headline {
                models.push((self.config.debias.variants[0].name(), h));
            }
            for (name, m) in models {
                let r = identify_shortcuts(m, &ex.ids, ex.label, a.ig_steps, a.top_n, &none).map_err(|e| LabError::stage("analyze", e))?;
                rows.push((format!("{} [{name}]", ex.id), tokens.clone(), r.norms[..ex.len].to_vec()));
            }
        }
        heatmap_export(&self.path("reports/heatmap.html"), &rows).map_err(|e| LabError::stage("analyze", e))?;

        let bias_only: BiasOnlyReport = read_json(&self.path(BIAS_REPORT))?;
        let profiles: Vec<ShortcutProfile> = load_profiles(&self.path(PROFILES)).map_err(|e| LabError::stage("analyze", e))?;
        let mut artifacts = BTreeMap::new();
        for rel in self.inputs(Stage::Analyze) {
            artifacts.insert(rel.clone(), file_hash(&self.path(&rel))?);
        }
        let lmi_top: Vec<Vec<LmiRow>> = table
            .per_label
            .iter()
            .map(|rows| rows.iter().take(an.lmi_top_k).cloned().collect())
            .collect();
        let report = RunReport {
            config_hash: RunConfig::section_hash(&self.config),
            seeds: self.manifest.seeds.clone(),
            gap_points: 100.0 * (identification.dev.accuracy - identification.ood.accuracy),
            identification,
            variants,
            bias_only,
            profiles: profiles.len(),
            lmi_total: table.total,
            lmi_top,
            filtered_words: filtered,
            artifacts,
        };
        write_json(&self.path(REPORT), &report)?;
        write_text(&self.path(SUMMARY), &report.summary())?;
        Ok(vec![
            "reports/lmi.tsv".into(),
            "reports/filtered_words.txt".into(),
            "reports/loss_curves.json".into(),
            "reports/heatmap.html".into(),
            REPORT.into(),
            SUMMARY.into(),
        ])
    }

    pub fn report(&self) -> Result<RunReport> {
        read_json(&self.path(REPORT))
    }
}

fn check_alignment(stage: &str, train: &[EncodedExample], top: &[TopNRecord]) -> Result<()> {
    if train.len() != top.len() {
        return Err(LabError::stage(
            stage,
            format!("{} training examples but {} top-N records", train.len(), top.len()),
        ));
    }
    if let Some((ex, t)) = train.iter().zip(top).find(|(ex, t)| ex.id != t.id) {
        return Err(LabError::stage(stage, format!("top-N record `{}` where `{}` expected", t.id, ex.id)));
    }
    Ok(())
}

fn read_log(path: &Path) -> Result<TrainLog> {
    #[derive(Deserialize)]
    #[serde(tag = "kind", rename_all = "snake_case")]
    enum Line {
        Step(shortcut_core::training::StepRecord),
        Epoch(shortcut_core::training::EpochRecord),
    }
    let mut log = TrainLog::default();
    for line in read_jsonl::<Line>(path)? {
        match line {
            Line::Step(s) => log.steps.push(s),
            Line::Epoch(e) => log.epochs.push(e),
        }
    }
    Ok(log)
}

/// Bias-only accuracy on held-out examples that carry a planted shortcut.
fn bias_holdout(
    model: &ClassifierModel,
    bias: &BiasOnlyModel,
    holdout: &[EncodedExample],
    config: &RunConfig,
) -> std::result::Result<(usize, usize), String> {
    let a = &config.attribution;
    let none = HashSet::new();
    let (mut correct, mut total) = (0, 0);
    for ex in holdout.iter().filter(|e| !e.shortcut_positions.is_empty()) {
        let r = identify_shortcuts(model, &ex.ids, ex.label, a.ig_steps, a.top_n, &none).map_err(|e| e.to_string())?;
        let f = build_bias_features(model, &ex.ids, &r.selected, a.top_n).map_err(|e| e.to_string())?;
        let p = bias.bias_only_forward(&f).map_err(|e| e.to_string())?;
        total += 1;
        if argmax(&p) == ex.label {
            correct += 1;
        }
    }
    Ok((correct, total))
}

/// Loads a classifier checkpoint and refuses it if it was built for another
/// vocabulary.
pub fn load_classifier_checked(path: &Path, vocab: &Vocabulary) -> Result<ClassifierModel> {
    let ck = Checkpoint::load(path)?;
    let actual = vocab.content_hash();
    if ck.vocab_hash != actual {
        return Err(LabError::VocabMismatch {
            expected: ck.vocab_hash,
            actual,
        });
    }
    ck.into_classifier(path)
}

/// Metrics of a checkpoint on one split of a run directory.
pub fn evaluate_checkpoint(dir: &Path, checkpoint: &Path, split: &str, max_seq_len: usize) -> Result<Metrics> {
    let rel = match split {
        "train" => TRAIN,
        "dev" => DEV,
        "ood" => OOD,
        other => return Err(LabError::Config(format!("unknown split `{other}` (train, dev, ood)"))),
    };
    let vocab = Vocabulary::load(&dir.join(VOCAB)).map_err(|e| LabError::stage("eval", e))?;
    let model = load_classifier_checked(checkpoint, &vocab)?;
    let corpus = Corpus::load(&dir.join(rel)).map_err(|e| LabError::stage("eval", e))?;
    let examples = encode_corpus(&corpus, &vocab, max_seq_len).map_err(|e| LabError::stage("eval", e))?;
    if let Some(ex) = examples.iter().find(|e| e.label >= model.config.num_labels) {
        return Err(LabError::stage("eval", format!("example `{}` has an out-of-range label", ex.id)));
    }
    evaluate(&model, &examples).map_err(|e| LabError::stage("eval", e))
}
