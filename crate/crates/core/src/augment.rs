//! Fine-tuning dataset construction: one prompt per column per template.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{write_atomic, Error, Result};
use crate::model::Tokenizer;
use crate::prompt::{fit_to_budget, render, template, PromptComponents};
use crate::sampling::{sample_values, SamplingKind, SamplingStrategy};
use crate::seed::derive_seed;
use crate::table::{ColumnSource, LabelSpace, LabeledColumn};

/// One training or evaluation example `(x, y)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub input_text: String,
    pub target_label: String,
    pub template_id: String,
    pub sampling_kind: SamplingKind,
    pub column_source: ColumnSource,
    pub seed_used: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBuildConfig {
    pub templates: Vec<String>,
    pub pairing: BTreeMap<String, SamplingKind>,
    pub budget_k: usize,
    /// Token budget per prompt; needs a tokenizer when set.
    pub max_tokens: Option<usize>,
    pub seed: u64,
}

/// p1 with archetype values, p2 with random values, p3 with the shortest.
pub fn default_pairing() -> BTreeMap<String, SamplingKind> {
    [
        ("p1", SamplingKind::Archetype),
        ("p2", SamplingKind::Random),
        ("p3", SamplingKind::Shortest),
        ("p4", SamplingKind::Shortest),
        ("p5", SamplingKind::Shortest),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

impl DatasetBuildConfig {
    pub fn new(templates: &[&str], seed: u64) -> Self {
        Self {
            templates: templates.iter().map(|t| t.to_string()).collect(),
            pairing: default_pairing(),
            budget_k: 5,
            max_tokens: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("no templates selected".into()));
        }
        if self.budget_k == 0 {
            return Err(Error::Config("budget_k must be at least 1".into()));
        }
        for t in &self.templates {
            template(t)?;
            if !self.pairing.contains_key(t) {
                return Err(Error::Config(format!("no sampling strategy paired with template {t}")));
            }
        }
        Ok(())
    }
}

/// Seed for one (column, template) instance.
pub fn instance_seed(seed: u64, source: &ColumnSource, template_id: &str) -> u64 {
    derive_seed(seed, &["instance", &source.table, &source.column.to_string(), template_id])
}

/// Renders every column under every selected template. Output is ordered by
/// column source, then template id.
pub fn build_dataset(
    columns: &[LabeledColumn],
    label_space: &LabelSpace,
    cfg: &DatasetBuildConfig,
    tokenizer: Option<&Tokenizer>,
) -> Result<Vec<PromptInstance>> {
    if columns.is_empty() {
        return Err(Error::Config("no columns to build a dataset from".into()));
    }
    cfg.validate()?;
    if cfg.max_tokens.is_some() && tokenizer.is_none() {
        return Err(Error::Config("max_tokens requires a tokenizer".into()));
    }
    let mut templates = Vec::new();
    for id in &cfg.templates {
        templates.push((template(id)?, cfg.pairing[id]));
    }
    let labels = label_space.labels().to_vec();
    let mut out: Vec<PromptInstance> = columns
        .par_iter()
        .map(|lc| -> Result<Vec<PromptInstance>> {
            if !label_space.contains(&lc.label) {
                return Err(Error::UnknownLabel(lc.label.clone()));
            }
            let mut rows = Vec::with_capacity(templates.len());
            for (t, kind) in &templates {
                let seed = instance_seed(cfg.seed, &lc.column.source, &t.id);
                let values = sample_values(&lc.column, &SamplingStrategy::new(*kind, cfg.budget_k, seed))?;
                let mut comps = PromptComponents::new(t.instruction(), values, labels.clone())?;
                if let (Some(max), Some(tok)) = (cfg.max_tokens, tokenizer) {
                    comps = fit_to_budget(&comps, t, max, tok)?.0;
                }
                rows.push(PromptInstance {
                    input_text: render(t, &comps),
                    target_label: lc.label.clone(),
                    template_id: t.id.clone(),
                    sampling_kind: *kind,
                    column_source: lc.column.source.clone(),
                    seed_used: seed,
                });
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    out.sort_by(|a, b| (&a.column_source, &a.template_id).cmp(&(&b.column_source, &b.template_id)));
    Ok(out)
}

/// One JSON object per line.
pub fn dataset_to_string(instances: &[PromptInstance]) -> String {
    let mut buf = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut buf, inst).expect("instance serializes");
        buf.write_all(b"\n").expect("write to vec");
    }
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn dataset_from_str(text: &str) -> Result<Vec<PromptInstance>> {
    let mut out = Vec::new();
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let Some(body) = line.strip_suffix('\n') else {
            return Err(Error::MalformedRecord {
                line: i + 1,
                message: "record is not newline-terminated".into(),
            });
        };
        let inst = serde_json::from_str(body).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn serialize_dataset(instances: &[PromptInstance], path: &Path) -> Result<()> {
    write_atomic(path, dataset_to_string(instances).as_bytes())
}

pub fn deserialize_dataset(path: &Path) -> Result<Vec<PromptInstance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_from_str(&text)
}
