//! Prompt components, the built-in templates, and token-budget fitting.
//!
//! A template is a scaffold with `{instruction}`, `{values}` and `{labels}`
//! placeholders. `{values}` and `{labels}` must each appear exactly once;
//! `{instruction}` is optional (p4 and p5 carry their instruction inline).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Tokenizer;
use crate::sampling::SamplingKind;
use crate::table::ColumnSource;

/// The task instruction `t_i`, sampled values `s_c` and label options `s_ℓ`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptComponents {
    pub task_instruction: String,
    pub sampled_values: Vec<String>,
    pub label_options: Vec<String>,
}

impl PromptComponents {
    pub fn new(task_instruction: impl Into<String>, sampled_values: Vec<String>, label_options: Vec<String>) -> Result<Self> {
        let comps = Self {
            task_instruction: task_instruction.into(),
            sampled_values,
            label_options,
        };
        comps.validate()?;
        Ok(comps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sampled_values.is_empty() {
            return Err(Error::InvalidPrompt("no sampled values".into()));
        }
        if self.label_options.is_empty() {
            return Err(Error::InvalidPrompt("no label options".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Text(String),
    Instruction,
    Values,
    Labels,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub segments: Vec<Segment>,
    /// Instruction used when building prompts from a labeled column.
    pub default_instruction: Option<String>,
    pub train: bool,
    pub test: bool,
}

impl PromptTemplate {
    /// Parses a scaffold string. Literal braces are not supported.
    pub fn parse(id: &str, scaffold: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut rest = scaffold;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                segments.push(Segment::Text(rest[..open].to_string()));
            }
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| Error::TemplateParse(format!("{id}: unclosed `{{`")))?
                + open;
            segments.push(match &rest[open + 1..close] {
                "instruction" => Segment::Instruction,
                "values" => Segment::Values,
                "labels" => Segment::Labels,
                other => return Err(Error::TemplateParse(format!("{id}: unknown placeholder `{{{other}}}`"))),
            });
            rest = &rest[close + 1..];
        }
        if rest.contains('}') {
            return Err(Error::TemplateParse(format!("{id}: stray `}}`")));
        }
        if !rest.is_empty() {
            segments.push(Segment::Text(rest.to_string()));
        }
        for (slot, name) in [(Segment::Values, "values"), (Segment::Labels, "labels")] {
            let n = segments.iter().filter(|s| **s == slot).count();
            if n != 1 {
                return Err(Error::TemplateParse(format!("{id}: `{{{name}}}` must appear once, found {n}")));
            }
        }
        if segments.iter().filter(|s| **s == Segment::Instruction).count() > 1 {
            return Err(Error::TemplateParse(format!("{id}: `{{instruction}}` appears more than once")));
        }
        Ok(Self {
            id: id.to_string(),
            segments,
            default_instruction: None,
            train: false,
            test: true,
        })
    }

    pub fn scaffold(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text(t) => t.as_str(),
                Segment::Instruction => "{instruction}",
                Segment::Values => "{values}",
                Segment::Labels => "{labels}",
            })
            .collect()
    }

    pub fn has_instruction_slot(&self) -> bool {
        self.segments.contains(&Segment::Instruction)
    }

    /// Instruction text to place in the components for this template.
    pub fn instruction(&self) -> &str {
        self.default_instruction.as_deref().unwrap_or(DEFAULT_INSTRUCTION)
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.id, self.scaffold())
    }
}

const DEFAULT_INSTRUCTION: &str = "Pick the column's semantic label.";

const P1: &str = "INSTRUCTION: {instruction} OPTIONS: {labels} INPUT: {values} Answer:";
const P2: &str = "Column: {values}. {instruction} Labels: {labels} Output:";
const P3: &str = "{instruction} Column: {values} Labels: {labels} Answer:";
const P4: &str = "Pick the column's class. I mean if you want to. It would be cool, I think. Anyway, give it a try, I guess? Here's the column itself! {values} And, um, here are some column names you could pick from ... {labels} OK, go ahead!";
const P5: &str = "Given the input column: {values}, choose the most appropriate label from the following options and return only the label. OPTIONS: {labels}";

/// The five built-in templates: p1-p3 for training and testing, p4-p5 for
/// testing only.
pub fn template_registry() -> Vec<PromptTemplate> {
    let built = |id: &str, scaffold: &str, instruction: Option<&str>, train: bool| {
        let mut t = PromptTemplate::parse(id, scaffold).expect("built-in scaffold parses");
        t.default_instruction = instruction.map(str::to_string);
        t.train = train;
        t
    };
    vec![
        built("p1", P1, Some("Select the option which best describes the input."), true),
        built("p2", P2, Some("Pick the column's label."), true),
        built("p3", P3, Some(DEFAULT_INSTRUCTION), true),
        built("p4", P4, None, false),
        built("p5", P5, None, false),
    ]
}

pub fn template(id: &str) -> Result<PromptTemplate> {
    template_registry()
        .into_iter()
        .find(|t| t.id == id)
        .ok_or_else(|| Error::UnknownTemplate(id.to_string()))
}

/// Reads extra templates, one `id<TAB>scaffold` per line. Blank lines and
/// lines starting with `#` are skipped. Loaded templates are test-only.
pub fn load_template_file(path: &Path) -> Result<Vec<PromptTemplate>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, scaffold) = line
            .split_once('\t')
            .ok_or_else(|| Error::TemplateParse(format!("{}:{}: expected `id<TAB>scaffold`", path.display(), i + 1)))?;
        let id = id.trim();
        if id.is_empty() || template_registry().iter().any(|t| t.id == id) || out.iter().any(|t: &PromptTemplate| t.id == id) {
            return Err(Error::TemplateParse(format!("{}:{}: empty or duplicate id `{id}`", path.display(), i + 1)));
        }
        out.push(PromptTemplate::parse(id, scaffold)?);
    }
    Ok(out)
}

/// Python-style repr of a string.
fn quote(value: &str) -> String {
    let delim = if value.contains('\'') && !value.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(value.len() + 2);
    out.push(delim);
    for ch in value.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if c == delim => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(delim);
    out
}

/// `['London', 'Boston']`
pub fn serialize_values(values: &[String]) -> String {
    let items: Vec<String> = values.iter().map(|v| quote(v)).collect();
    format!("[{}]", items.join(", "))
}

/// `Location, Person`
pub fn serialize_labels(labels: &[String]) -> String {
    labels.join(", ")
}

/// Assembles the prompt text. Pure string concatenation.
pub fn render(template: &PromptTemplate, comps: &PromptComponents) -> String {
    let mut out = String::new();
    for seg in &template.segments {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Instruction => out.push_str(&comps.task_instruction),
            Segment::Values => out.push_str(&serialize_values(&comps.sampled_values)),
            Segment::Labels => out.push_str(&serialize_labels(&comps.label_options)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub template_id: String,
    pub sampling_kind: SamplingKind,
    pub column_source: ColumnSource,
    pub truncated_value_count: usize,
}

/// Drops trailing values until the prompt encodes to at most `max_tokens`
/// tokens. Returns the fitted components and the number of dropped values.
pub fn fit_to_budget(
    comps: &PromptComponents,
    template: &PromptTemplate,
    max_tokens: usize,
    tokenizer: &Tokenizer,
) -> Result<(PromptComponents, usize)> {
    comps.validate()?;
    let cost = |c: &PromptComponents| tokenizer.encode(&render(template, c)).len();
    if cost(comps) <= max_tokens {
        return Ok((comps.clone(), 0));
    }
    let mut fitted = comps.clone();
    let minimal = {
        fitted.sampled_values.truncate(1);
        cost(&fitted)
    };
    if minimal > max_tokens {
        return Err(Error::BudgetTooSmall {
            budget: max_tokens,
            needed: minimal,
        });
    }
    // cost grows with the number of kept values, so search for the largest fit
    let (mut lo, mut hi) = (1, comps.sampled_values.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        fitted.sampled_values = comps.sampled_values[..mid].to_vec();
        if cost(&fitted) <= max_tokens {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    fitted.sampled_values = comps.sampled_values[..lo].to_vec();
    Ok((fitted, comps.sampled_values.len() - lo))
}

/// Every scaffold word of the built-in templates, for vocabulary building.
pub fn scaffold_texts() -> Vec<String> {
    template_registry()
        .iter()
        .flat_map(|t| {
            let mut v: Vec<String> = t
                .segments
                .iter()
                .filter_map(|s| match s {
                    Segment::Text(x) => Some(x.clone()),
                    _ => None,
                })
                .collect();
            v.extend(t.default_instruction.clone());
            v
        })
        .collect()
}
