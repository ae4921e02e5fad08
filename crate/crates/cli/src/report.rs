//! The analysis stage's outputs. Nothing here depends on wall-clock time, so
//! two runs with the same config and seeds produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use shortcut_core::analysis::{Histogram, LmiRow, Metrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeReport {
    pub mean_s2_hat_shortcut: f64,
    pub mean_s2_hat_clean: f64,
    /// Share of shortcut-bearing training examples whose top-N contains a
    /// planted shortcut position.
    pub identification_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasOnlyReport {
    pub subset_size: usize,
    pub visits_per_example: usize,
    pub warnings: Vec<String>,
    /// Shortcut-bearing dev examples the bias-only model was scored on.
    pub holdout_examples: usize,
    pub holdout_accuracy: f64,
    pub degree: DegreeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub dev: Metrics,
    pub ood: Metrics,
    pub confidence: Histogram,
    pub top1_share: f64,
    pub steps_to_threshold: Option<usize>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub identification: ModelReport,
    /// Dev minus OOD accuracy of the identification model, in points.
    pub gap_points: f64,
    pub variants: Vec<ModelReport>,
    pub bias_only: BiasOnlyReport,
    pub profiles: usize,
    pub lmi_total: u64,
    pub lmi_top: Vec<Vec<LmiRow>>,
    pub filtered_words: Vec<String>,
    pub artifacts: BTreeMap<String, String>,
}

impl RunReport {
    pub fn variant(&self, name: &str) -> Option<&ModelReport> {
        self.variants.iter().find(|m| m.name == name)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Run summary\n");
        let _ = writeln!(s, "config `{}`\n", &self.config_hash[..16.min(self.config_hash.len())]);
        let _ = writeln!(s, "| model | dev acc | ood acc | dev conf | top-1 share | steps to tau |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for m in std::iter::once(&self.identification).chain(&self.variants) {
            let steps = m.steps_to_threshold.map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(
                s,
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {} |",
                m.name, m.dev.accuracy, m.ood.accuracy, m.dev.mean_confidence, m.top1_share, steps
            );
        }
        let _ = writeln!(s, "\nidentification gap: {:.2} points", self.gap_points);
        let b = &self.bias_only;
        let _ = writeln!(
            s,
            "bias-only holdout accuracy: {:.4} over {} shortcut-bearing dev examples",
            b.holdout_accuracy, b.holdout_examples
        );
        let _ = writeln!(
            s,
            "mean normalized degree: {:.4} shortcut, {:.4} clean; top-N hits a planted position in {:.4}",
            b.degree.mean_s2_hat_shortcut, b.degree.mean_s2_hat_clean, b.degree.identification_precision
        );
        for w in &b.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        let _ = writeln!(s, "\nLMI over {} occurrences:\n", self.lmi_total);
        for (label, rows) in self.lmi_top.iter().enumerate() {
            let words: Vec<String> = rows.iter().map(|r| format!("{} ({:.4})", r.word, r.lmi)).collect();
            let _ = writeln!(s, "- label {label}: {}", words.join(", "));
        }
        let _ = writeln!(s, "\nfiltered words: {}", self.filtered_words.join(", "));
        s
    }
}
