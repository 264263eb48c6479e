//! Inference over templated test sets, label remapping, and sensitivity
//! reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{build_dataset, DatasetBuildConfig};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{generate_greedy, Checkpoint};
use crate::sampling::SamplingKind;
use crate::table::{ColumnSource, LabelSpace, LabeledColumn};
use crate::trainer::encode_prompt;

/// Edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.chars().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Maps free text onto a label: exact match, then trimmed case-insensitive
/// match, then a label uniquely contained in the text, then the closest
/// label by edit distance (ties lexicographic).
pub fn remap_to_label_space(raw: &str, labels: &LabelSpace) -> String {
    let all = labels.labels();
    if let Some(l) = all.iter().find(|l| l.as_str() == raw) {
        return l.clone();
    }
    let folded = raw.trim().to_lowercase();
    if let Some(l) = all.iter().find(|l| l.to_lowercase() == folded) {
        return l.clone();
    }
    let contained: Vec<&String> = all
        .iter()
        .filter(|l| !l.is_empty() && folded.contains(&l.to_lowercase()))
        .collect();
    if contained.len() == 1 {
        return contained[0].clone();
    }
    all.iter()
        .min_by(|a, b| levenshtein(raw, a).cmp(&levenshtein(raw, b)).then_with(|| a.cmp(b)))
        .cloned()
        .expect("label space is non-empty")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub column_source: ColumnSource,
    pub template_id: String,
    pub raw_output: String,
    pub mapped_label: String,
    pub gold_label: String,
}

/// Greedy predictions for every test column under one template.
pub fn predict_labels(
    checkpoint: &Checkpoint,
    test_columns: &[LabeledColumn],
    label_space: &LabelSpace,
    template_id: &str,
    build: &DatasetBuildConfig,
    max_new_tokens: usize,
) -> Result<Vec<PredictionRecord>> {
    let mut cfg = build.clone();
    cfg.templates = vec![template_id.to_string()];
    let instances = build_dataset(test_columns, label_space, &cfg, Some(&checkpoint.tokenizer))?;
    let adapters = checkpoint.adapters.as_ref();
    instances
        .par_iter()
        .map(|inst| {
            let ids = encode_prompt(&checkpoint.tokenizer, &inst.input_text);
            let out = generate_greedy(&checkpoint.weights, adapters, &ids, max_new_tokens)?;
            let raw_output = checkpoint.tokenizer.decode(&out);
            Ok(PredictionRecord {
                column_source: inst.column_source.clone(),
                template_id: inst.template_id.clone(),
                mapped_label: remap_to_label_space(&raw_output, label_space),
                raw_output,
                gold_label: inst.target_label.clone(),
            })
        })
        .collect()
}

/// Evaluation uses the shortest values for every template.
pub fn eval_build_config(seed: u64, budget_k: usize, max_tokens: Option<usize>) -> DatasetBuildConfig {
    let mut cfg = DatasetBuildConfig::new(&["p3"], seed);
    cfg.pairing.values_mut().for_each(|k| *k = SamplingKind::Shortest);
    cfg.budget_k = budget_k;
    cfg.max_tokens = max_tokens;
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateScores {
    pub per_label_f1: BTreeMap<String, f64>,
    pub weighted_f1: f64,
    pub n: usize,
}

impl TemplateScores {
    pub fn from_records(records: &[PredictionRecord]) -> Self {
        let gold: Vec<&str> = records.iter().map(|r| r.gold_label.as_str()).collect();
        let pred: Vec<&str> = records.iter().map(|r| r.mapped_label.as_str()).collect();
        Self {
            per_label_f1: metrics::per_label_f1(&gold, &pred),
            weighted_f1: metrics::weighted_f1(&gold, &pred),
            n: records.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub per_template: BTreeMap<String, TemplateScores>,
    pub spread: f64,
    pub mean_abs_deviation: f64,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    fn finish(name: String, per_template: BTreeMap<String, TemplateScores>, fingerprint: String, seeds: Vec<u64>) -> Self {
        let f1s: Vec<f64> = per_template.values().map(|s| s.weighted_f1).collect();
        Self {
            name,
            spread: metrics::spread(&f1s),
            mean_abs_deviation: metrics::mean_abs_deviation(&f1s),
            per_template,
            fingerprint,
            seeds,
        }
    }

    pub fn weighted_f1(&self, template_id: &str) -> Option<f64> {
        self.per_template.get(template_id).map(|s| s.weighted_f1)
    }

    /// Seed average: per-template scores are averaged, then the spread is
    /// recomputed on the averages.
    pub fn average(name: &str, reports: &[EvalReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::Config("nothing to average".into()))?;
        let mut per_template = BTreeMap::new();
        for tid in first.per_template.keys() {
            let scores: Vec<&TemplateScores> = reports
                .iter()
                .map(|r| r.per_template.get(tid).ok_or_else(|| Error::Config(format!("report lacks template {tid}"))))
                .collect::<Result<_>>()?;
            let mut labels: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for s in &scores {
                for (l, f) in &s.per_label_f1 {
                    labels.entry(l.clone()).or_default().push(*f);
                }
            }
            per_template.insert(
                tid.clone(),
                TemplateScores {
                    per_label_f1: labels.into_iter().map(|(l, v)| (l, metrics::mean(&v))).collect(),
                    weighted_f1: metrics::mean(&scores.iter().map(|s| s.weighted_f1).collect::<Vec<_>>()),
                    n: scores.iter().map(|s| s.n).sum(),
                },
            );
        }
        let seeds = reports.iter().flat_map(|r| r.seeds.iter().copied()).collect();
        Ok(Self::finish(name.to_string(), per_template, first.fingerprint.clone(), seeds))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// `template,weighted_f1` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,template,weighted_f1\n");
        for (t, s) in &self.per_template {
            writeln!(out, "{},{t},{:.6}", self.name, s.weighted_f1).unwrap();
        }
        out
    }
}

/// Builds a report from per-template prediction sets. Needs at least two
/// templates.
pub fn sensitivity_report(
    name: &str,
    records: &BTreeMap<String, Vec<PredictionRecord>>,
    fingerprint: &str,
    seeds: &[u64],
) -> Result<EvalReport> {
    if records.len() < 2 {
        return Err(Error::Config("a sensitivity report needs at least two templates".into()));
    }
    let per_template = records
        .iter()
        .map(|(t, r)| (t.clone(), TemplateScores::from_records(r)))
        .collect();
    Ok(EvalReport::finish(name.to_string(), per_template, fingerprint.to_string(), seeds.to_vec()))
}

/// Aligned text table with one row per report.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let mut templates: Vec<String> = Vec::new();
    for r in reports {
        for t in r.per_template.keys() {
            if !templates.contains(t) {
                templates.push(t.clone());
            }
        }
    }
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:width$}", "model");
    for t in &templates {
        write!(out, "  {t:>6}").unwrap();
    }
    out.push_str("  spread     mad\n");
    for r in reports {
        write!(out, "{:width$}", r.name).unwrap();
        for t in &templates {
            match r.weighted_f1(t) {
                Some(f) => write!(out, "  {f:>6.3}").unwrap(),
                None => write!(out, "  {:>6}", "-").unwrap(),
            }
        }
        writeln!(out, "  {:>6.3}  {:>6.3}", r.spread, r.mean_abs_deviation).unwrap();
    }
    out
}

/// Checks report invariants; used by the CLI to choose its exit code.
pub fn self_check(report: &EvalReport) -> Result<()> {
    let ok = |x: f64| (0.0..=1.0).contains(&x);
    for (t, s) in &report.per_template {
        if !ok(s.weighted_f1) || !s.per_label_f1.values().all(|&f| ok(f)) {
            return Err(Error::Config(format!("F1 outside [0, 1] for template {t}")));
        }
    }
    if !(report.spread >= 0.0) {
        return Err(Error::Config("negative spread".into()));
    }
    Ok(())
}
