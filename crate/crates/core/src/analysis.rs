//! Word–label statistics, confidence distributions, attribution heatmaps and
//! loss-curve summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EncodedExample;
use crate::models::{ClassifierModel, ModelError};
use crate::tensor::argmax;
use crate::training::{StepRecord, TrainLog};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("word has zero occurrences")]
    ZeroWordCount,
    #[error("pair count {count_wl} exceeds word count {count_w} or label count {count_l}")]
    InconsistentCounts { count_wl: u64, count_w: u64, count_l: u64 },
    #[error("no shortcut words to count")]
    Empty,
    #[error("histogram needs at least one bin")]
    ZeroBins,
    #[error("{tokens} tokens but {norms} norms")]
    Misaligned { tokens: usize, norms: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `p(ω,l)·ln(p(l|ω)/p(l))` from raw counts; `total` is `|D|`.
pub fn lmi(count_wl: u64, count_w: u64, count_l: u64, total: u64) -> Result<f64, AnalysisError> {
    if count_w == 0 {
        return Err(AnalysisError::ZeroWordCount);
    }
    if count_wl > count_w || count_wl > count_l || count_l > total {
        return Err(AnalysisError::InconsistentCounts {
            count_wl,
            count_w,
            count_l,
        });
    }
    if count_wl == 0 {
        return Ok(0.0);
    }
    let d = total as f64;
    let p_wl = count_wl as f64 / d;
    let p_l_given_w = count_wl as f64 / count_w as f64;
    let p_l = count_l as f64 / d;
    Ok(p_wl * (p_l_given_w / p_l).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiRow {
    pub label: usize,
    pub word: String,
    pub count_wl: u64,
    pub count_w: u64,
    pub count_l: u64,
    pub lmi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiTable {
    /// `|D|`: shortcut-word occurrences counted.
    pub total: u64,
    /// One list per label, highest LMI first.
    pub per_label: Vec<Vec<LmiRow>>,
}

/// Counts every `(word, label)` occurrence, then ranks each label's words by
/// LMI (ties by word). `top_k = None` keeps every row.
pub fn top_lmi_table(
    occurrences: &[(String, usize)],
    num_labels: usize,
    top_k: Option<usize>,
) -> Result<LmiTable, AnalysisError> {
    if occurrences.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut pair: BTreeMap<(usize, &str), u64> = BTreeMap::new();
    let mut word: BTreeMap<&str, u64> = BTreeMap::new();
    let mut label = vec![0u64; num_labels];
    for (w, l) in occurrences {
        *pair.entry((*l, w.as_str())).or_default() += 1;
        *word.entry(w.as_str()).or_default() += 1;
        label[*l] += 1;
    }
    let total = occurrences.len() as u64;
    let mut per_label: Vec<Vec<LmiRow>> = vec![Vec::new(); num_labels];
    for (&(l, w), &c) in &pair {
        per_label[l].push(LmiRow {
            label: l,
            word: w.to_string(),
            count_wl: c,
            count_w: word[w],
            count_l: label[l],
            lmi: lmi(c, word[w], label[l], total)?,
        });
    }
    for rows in &mut per_label {
        rows.sort_by(|a, b| b.lmi.total_cmp(&a.lmi).then_with(|| a.word.cmp(&b.word)));
        if let Some(k) = top_k {
            rows.truncate(k);
        }
    }
    Ok(LmiTable { total, per_label })
}

/// Words of every top-N selection, paired with the example's gold label.
pub fn shortcut_occurrences(examples: &[EncodedExample], selections: &[Vec<usize>], token: impl Fn(usize) -> String) -> Vec<(String, usize)> {
    examples
        .iter()
        .zip(selections)
        .flat_map(|(ex, sel)| sel.iter().map(|&p| (token(ex.ids[p]), ex.label)).collect::<Vec<_>>())
        .collect()
}

impl LmiTable {
    /// Tab-separated: label, word, count_wl, count_w, count_l, lmi.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("label\tword\tcount_wl\tcount_w\tcount_l\tlmi\n");
        for row in self.per_label.iter().flatten() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.9}",
                row.label, row.word, row.count_wl, row.count_w, row.count_l, row.lmi
            );
        }
        out
    }
}

/// Union over label pairs of the intersection of their top-`k` words.
pub fn filtered_word_list(table: &LmiTable, k: usize) -> BTreeSet<String> {
    let tops: Vec<BTreeSet<&str>> = table
        .per_label
        .iter()
        .map(|rows| rows.iter().take(k).map(|r| r.word.as_str()).collect())
        .collect();
    let mut out = BTreeSet::new();
    for i in 0..tops.len() {
        for j in i + 1..tops.len() {
            out.extend(tops[i].intersection(&tops[j]).map(|w| w.to_string()));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges spanning `[0, 1]`.
    pub edges: Vec<f64>,
    /// Share of values per bin; sums to 1 when non-empty.
    pub density: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram, AnalysisError> {
    if bins == 0 {
        return Err(AnalysisError::ZeroBins);
    }
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(Histogram {
        edges,
        density: counts.iter().map(|&c| c as f64 / n).collect(),
        mean,
        variance,
    })
}

pub fn max_probabilities(model: &ClassifierModel, examples: &[EncodedExample]) -> Result<Vec<f64>, ModelError> {
    examples
        .iter()
        .map(|ex| {
            model
                .predict_proba(&ex.ids)
                .map(|p| p.into_iter().fold(0.0, f64::max))
        })
        .collect()
}

/// Distribution of `max_k p(k)` over a split.
pub fn confidence_histogram(
    model: &ClassifierModel,
    examples: &[EncodedExample],
    bins: usize,
) -> Result<Histogram, AnalysisError> {
    histogram(&max_probabilities(model, examples)?, bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: usize,
    pub support: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub examples: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub mean_confidence: f64,
    pub confidence_variance: f64,
}

pub fn evaluate(model: &ClassifierModel, examples: &[EncodedExample]) -> Result<Metrics, ModelError> {
    let k = model.config.num_labels;
    let mut support = vec![0usize; k];
    let mut correct = vec![0usize; k];
    let mut conf = Vec::with_capacity(examples.len());
    for ex in examples {
        let p = model.predict_proba(&ex.ids)?;
        support[ex.label] += 1;
        if argmax(&p) == ex.label {
            correct[ex.label] += 1;
        }
        conf.push(p.into_iter().fold(0.0, f64::max));
    }
    let n = examples.len().max(1) as f64;
    let mean = conf.iter().sum::<f64>() / n;
    Ok(Metrics {
        examples: examples.len(),
        accuracy: correct.iter().sum::<usize>() as f64 / n,
        per_class: (0..k)
            .map(|label| ClassMetrics {
                label,
                support: support[label],
                correct: correct[label],
                accuracy: if support[label] == 0 {
                    0.0
                } else {
                    correct[label] as f64 / support[label] as f64
                },
            })
            .collect(),
        mean_confidence: mean,
        confidence_variance: conf.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n,
    })
}

/// Per-token shade in `[0, 1]`: min-max normalized within the sentence.
pub fn heatmap_shades(norms: &[f64]) -> Vec<f64> {
    crate::shortcut::normalize_batch(norms)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One sentence as inline-styled HTML, darker green for larger attribution.
pub fn heatmap_html(rows: &[(String, Vec<String>, Vec<f64>)]) -> Result<String, AnalysisError> {
    let mut out = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>attribution</title></head>\n<body style=\"font-family:monospace\">\n",
    );
    for (caption, tokens, norms) in rows {
        if tokens.len() != norms.len() {
            return Err(AnalysisError::Misaligned {
                tokens: tokens.len(),
                norms: norms.len(),
            });
        }
        let _ = write!(out, "<p><b>{}</b> ", escape(caption));
        for (tok, shade) in tokens.iter().zip(heatmap_shades(norms)) {
            let _ = write!(
                out,
                "<span style=\"background:rgba(0,128,0,{shade:.3});padding:2px\">{}</span> ",
                escape(tok)
            );
        }
        out.push_str("</p>\n");
    }
    out.push_str("</body></html>\n");
    Ok(out)
}

pub fn heatmap_export(path: &Path, rows: &[(String, Vec<String>, Vec<f64>)]) -> Result<(), AnalysisError> {
    let html = heatmap_html(rows)?;
    std::fs::write(path, html).map_err(|source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// First step whose trailing `window`-step mean CE is at or below `tau`.
pub fn steps_to_threshold(steps: &[StepRecord], tau: f64, window: usize) -> Option<usize> {
    let w = window.max(1);
    let mut sum = 0.0;
    for (i, s) in steps.iter().enumerate() {
        sum += s.ce;
        if i >= w {
            sum -= steps[i - w].ce;
        }
        let n = (i + 1).min(w) as f64;
        if i + 1 >= w && sum / n <= tau {
            return Some(s.step);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSeries {
    pub name: String,
    pub total: Vec<f64>,
    pub steps_to_threshold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurveReport {
    pub tau: f64,
    pub window: usize,
    pub series: Vec<LossSeries>,
}

pub fn loss_curve_report(logs: &[(&str, &TrainLog)], tau: f64, window: usize) -> LossCurveReport {
    LossCurveReport {
        tau,
        window,
        series: logs
            .iter()
            .map(|(name, log)| LossSeries {
                name: name.to_string(),
                total: log.steps.iter().map(|s| s.total).collect(),
                steps_to_threshold: steps_to_threshold(&log.steps, tau, window),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lmi_worked_example() {
        let v = lmi(4, 5, 10, 20).unwrap();
        assert!((v - 0.2 * 1.6f64.ln()).abs() < 1e-15);
        assert!((v - 0.0940).abs() < 5e-5);
    }

    #[test]
    fn lmi_degenerate_cases() {
        assert_eq!(lmi(2, 4, 10, 20).unwrap(), 0.0);
        assert_eq!(lmi(5, 5, 20, 20).unwrap(), 0.0);
        assert!(matches!(lmi(0, 0, 1, 1), Err(AnalysisError::ZeroWordCount)));
    }

    fn occ(pairs: &[(&str, usize)]) -> Vec<(String, usize)> {
        pairs.iter().map(|(w, l)| (w.to_string(), *l)).collect()
    }

    #[test]
    fn table_counts_are_consistent() {
        let o = occ(&[("a", 0), ("a", 0), ("b", 1), ("a", 1), ("c", 1)]);
        let t = top_lmi_table(&o, 2, None).unwrap();
        assert_eq!(t.total, 5);
        assert_eq!(t.per_label[0][0].word, "a");
        assert_eq!(t.per_label[0][0].count_wl, 2);
        assert_eq!(t.per_label[0][0].count_w, 3);
        assert_eq!(t.per_label[1].len(), 3);
        assert!(top_lmi_table(&[], 2, None).is_err());
    }

    #[test]
    fn filtering_examples() {
        let o = occ(&[("x", 0), ("y", 1)]);
        assert!(filtered_word_list(&top_lmi_table(&o, 2, None).unwrap(), 10).is_empty());
        let o = occ(&[("the", 0), ("the", 1), ("the", 2), ("x", 0)]);
        let f = filtered_word_list(&top_lmi_table(&o, 3, None).unwrap(), 10);
        assert_eq!(f, BTreeSet::from(["the".to_string()]));
    }

    #[test]
    fn histogram_of_uniform_model() {
        let h = histogram(&[1.0 / 3.0; 7], 10).unwrap();
        assert!((h.density.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(h.density[3], 1.0);
        assert!(h.variance < 1e-30);
        assert_eq!(histogram(&[1.0], 4).unwrap().density[3], 1.0);
    }

    #[test]
    fn heatmap_shading() {
        assert_eq!(heatmap_shades(&[0.4, 0.4]), vec![0.0, 0.0]);
        assert_eq!(heatmap_shades(&[0.1, 2.0, 0.1]), vec![0.0, 1.0, 0.0]);
        let html = heatmap_html(&[("s".into(), vec!["<a>".into(), "b".into()], vec![0.0, 1.0])]).unwrap();
        assert!(html.contains("&lt;a&gt;"));
        assert!(html.contains("rgba(0,128,0,1.000)"));
    }

    fn rec(step: usize, ce: f64) -> StepRecord {
        StepRecord {
            step,
            epoch: 1,
            ce,
            jsd: 0.0,
            total: ce,
        }
    }

    #[test]
    fn threshold_crossing() {
        let s: Vec<StepRecord> = [1.0, 0.9, 0.4, 0.3, 0.2].iter().enumerate().map(|(i, c)| rec(i + 1, *c)).collect();
        assert_eq!(steps_to_threshold(&s, 0.5, 1), Some(3));
        assert_eq!(steps_to_threshold(&s, 0.5, 2), Some(4));
        assert_eq!(steps_to_threshold(&s, 0.1, 1), None);
        let log = TrainLog {
            steps: s,
            ..Default::default()
        };
        let r = loss_curve_report(&[("standard", &log)], 0.5, 1);
        assert_eq!(r.series.len(), 1);
        assert_eq!(r.series[0].total.len(), 5);
    }
}
