//! Experiment configuration, base-model preparation, and the comparison
//! recipes (single-template vs augmented, full data vs one third, LoRA vs
//! full fine-tuning).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_dataset, PromptInstance};
use crate::error::{Error, Result};
use crate::eval::{comparison_table, eval_build_config, predict_labels, sensitivity_report, EvalReport};
use crate::lora::LoraConfig;
use crate::model::{Checkpoint, MatrixId, ModelConfig, Tokenizer, TransformerWeights};
use crate::prompt::{fit_to_budget, render, scaffold_texts, serialize_labels, serialize_values, PromptComponents, PromptTemplate};
use crate::sampling::{sample_values, stratified_select, SamplingKind, SamplingStrategy};
use crate::seed::{derive_seed, fingerprint, rng_for};
use crate::synthgen::{generate_corpus, lexicon, GeneratorSpec};
use crate::table::{load_labeled_corpus, CorpusSplit, LabelSpace, LabeledColumn};
use crate::trainer::{train, OptimizerKind, TrainConfig, TrainMode};
use crate::CODE_VERSION;

/// Tokens reserved after the prompt for the label and `<eos>`.
pub const LABEL_RESERVE: usize = 12;

/// Generic instruction scaffolds used only to prepare the base model. None
/// of them shares its wording with p1-p5.
pub const PRETRAIN_SCAFFOLDS: &[&str] = &[
    "Values: {values} Choices: {labels} Type:",
    "Which of {labels} fits {values}? Reply:",
    "Classify the entries {values} as one of {labels}.",
    "{values} => {labels} =>",
    "Options are {labels}. The data is {values}",
    "Here is some data: {values} Possible types: {labels}",
];

pub fn pretrain_templates() -> Vec<PromptTemplate> {
    PRETRAIN_SCAFFOLDS
        .iter()
        .enumerate()
        .map(|(i, s)| PromptTemplate::parse(&format!("g{}", i + 1), s).expect("pretraining scaffold parses"))
        .collect()
}

/// Texts the base vocabulary is built from: scaffolds, label names, and the
/// generator word lists in bare and quoted positions. Numbers stay
/// character-level.
pub fn vocabulary_texts(labels: &[String]) -> Vec<String> {
    let mut texts = scaffold_texts();
    for t in pretrain_templates() {
        texts.push(t.scaffold().replace("{values}", "").replace("{labels}", ""));
    }
    texts.push(serialize_labels(labels));
    texts.extend(labels.iter().cloned());
    for w in lexicon() {
        for v in [w.to_string(), w.to_lowercase()] {
            texts.push(serialize_values(&[v.clone(), v.clone()]));
            texts.push(v);
        }
    }
    texts.push("https://www. 0123456789 $.-@:/+'\",[]?!=>".to_string());
    texts
}

/// Shape and schedule of the instruction-tuned base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_length: usize,
    pub columns_per_label: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Labels the base model never sees during instruction tuning.
    pub held_out_labels: Vec<String>,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            context_length: 256,
            columns_per_label: 40,
            epochs: 4,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 7,
            held_out_labels: ["ISBN", "Color"].iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl BaseConfig {
    pub fn fingerprint(&self, labels: &[String]) -> String {
        let body = serde_json::to_string(&(self, labels, PRETRAIN_SCAFFOLDS, CODE_VERSION)).expect("config serializes");
        fingerprint(body.as_bytes())
    }
}

/// Instruction-tuning prompts for the base model: generic scaffolds, a
/// shuffled random subset of the options that always contains the answer,
/// and a random value sampler.
pub fn pretrain_dataset(cfg: &BaseConfig, labels: &LabelSpace, tokenizer: &Tokenizer) -> Result<Vec<PromptInstance>> {
    let budget = cfg.context_length.saturating_sub(1 + LABEL_RESERVE);
    let spec = GeneratorSpec::standard(cfg.columns_per_label, derive_seed(cfg.seed, &["pretrain_corpus"]));
    let corpus = generate_corpus(&spec)?;
    let templates = pretrain_templates();
    let kinds = [SamplingKind::Archetype, SamplingKind::Random, SamplingKind::Shortest];
    let mut out = Vec::new();
    for lc in corpus.train.iter().chain(&corpus.validation).chain(&corpus.test) {
        if !labels.contains(&lc.label) || cfg.held_out_labels.contains(&lc.label) {
            continue;
        }
        for t in &templates {
            let src = &lc.column.source;
            let seed = derive_seed(cfg.seed, &["pretrain", &src.table, &t.id]);
            let mut rng = rng_for(seed, &["options"]);
            let kind = kinds[rng.random_range(0..kinds.len())];
            let k = rng.random_range(1..=5);
            let values = sample_values(&lc.column, &SamplingStrategy::new(kind, k, seed))?;
            let mut options: Vec<String> = labels
                .labels()
                .iter()
                .filter(|l| **l != lc.label && !cfg.held_out_labels.contains(l))
                .cloned()
                .collect();
            options.shuffle(&mut rng);
            options.truncate(rng.random_range(0..=options.len()));
            options.push(lc.label.clone());
            options.shuffle(&mut rng);
            let comps = PromptComponents::new("", values, options)?;
            let (comps, _) = fit_to_budget(&comps, t, budget, tokenizer)?;
            out.push(PromptInstance {
                input_text: render(t, &comps),
                target_label: lc.label.clone(),
                template_id: t.id.clone(),
                sampling_kind: kind,
                column_source: src.clone(),
                seed_used: seed,
            });
        }
    }
    Ok(out)
}

/// Builds the tokenizer, initialises the model, and instruction-tunes it
/// on the generic scaffolds with every parameter trainable.
pub fn build_base(cfg: &BaseConfig, labels: &LabelSpace, on_epoch: impl FnMut(usize, f64)) -> Result<Checkpoint> {
    let tokenizer = Tokenizer::build(&vocabulary_texts(labels.labels()))?;
    let config = ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        d_model: cfg.d_model,
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        d_ff: cfg.d_ff,
        context_length: cfg.context_length,
    };
    let weights = TransformerWeights::init(config, derive_seed(cfg.seed, &["base_init"]))?;
    let fp = cfg.fingerprint(labels.labels());
    let init = Checkpoint::base(tokenizer, weights, fp.clone());
    if cfg.epochs == 0 {
        return Ok(init);
    }
    let data = pretrain_dataset(cfg, labels, &init.tokenizer)?;
    let tc = TrainConfig {
        mode: TrainMode::Sft,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        max_epochs: cfg.epochs,
        seed: derive_seed(cfg.seed, &["pretrain_order"]),
        optimizer: OptimizerKind::Adam,
        lora: LoraConfig::default(),
        early_stop_loss: 0.0,
    };
    let trained = train(&data, &tc, &init, on_epoch)?;
    Ok(Checkpoint {
        kind: crate::model::CheckpointKind::Base,
        train_config: None,
        fingerprint: fp,
        ..trained
    })
}

/// Loads the base model from `dir` when a file with a matching fingerprint
/// exists, otherwise builds and stores it.
pub fn load_or_build_base(cfg: &BaseConfig, labels: &LabelSpace, dir: &Path, log: &mut dyn FnMut(&str)) -> Result<Checkpoint> {
    let fp = cfg.fingerprint(labels.labels());
    let path = dir.join(format!("base-{}.json", &fp[..16]));
    if path.exists() {
        let ckpt = Checkpoint::load(&path)?;
        if ckpt.fingerprint == fp {
            log(&format!("base model: reusing {}", path.display()));
            return Ok(ckpt);
        }
    }
    let start = Instant::now();
    let ckpt = build_base(cfg, labels, |e, l| log(&format!("base epoch {} loss {l:.4}", e + 1)))?;
    log(&format!("base model: built in {:.1}s", start.elapsed().as_secs_f64()));
    ckpt.save(&path)?;
    Ok(ckpt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CorpusSource {
    Synthetic(GeneratorSpec),
    Manifest(PathBuf),
}

impl CorpusSource {
    pub fn load(&self) -> Result<CorpusSplit> {
        match self {
            CorpusSource::Synthetic(spec) => generate_corpus(spec),
            CorpusSource::Manifest(p) => load_labeled_corpus(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub fractions: Vec<f64>,
    pub templates: Vec<String>,
    pub eval_templates: Vec<String>,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub budget_k: usize,
    pub max_new_tokens: usize,
    pub base: BaseConfig,
    pub output_dir: PathBuf,
}

/// Library training defaults with the adapter scale and targets the desk-scale
/// recipes need: with alpha equal to the rank, 70 Adam steps at lr 1e-4 do not
/// move a 64-wide model measurably.
pub fn experiment_train_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.lora.alpha = 4096.0;
    cfg.lora.targets = vec![
        MatrixId::Query,
        MatrixId::Key,
        MatrixId::Value,
        MatrixId::Output,
        MatrixId::FfIn,
        MatrixId::FfOut,
    ];
    cfg
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSource::Synthetic(GeneratorSpec::standard(50, 2024)),
            fractions: vec![1.0],
            templates: vec!["p3".into()],
            eval_templates: vec!["p3".into(), "p4".into(), "p5".into()],
            train: experiment_train_config(),
            seeds: vec![42, 1_902_582],
            budget_k: 5,
            max_new_tokens: 8,
            base: BaseConfig::default(),
            output_dir: PathBuf::from("ctalab-out"),
        }
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, T::Err> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(T::from_str).collect()
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("{key}: cannot parse `{value}` as {what}"));
        let num = |what| bad(what);
        let v = value.trim();
        match key.trim() {
            "corpus.manifest" => self.corpus = CorpusSource::Manifest(PathBuf::from(v)),
            "corpus.columns_per_label" | "corpus.seed" | "corpus.rows_min" | "corpus.rows_max" => {
                let mut spec = match &self.corpus {
                    CorpusSource::Synthetic(s) => s.clone(),
                    CorpusSource::Manifest(_) => GeneratorSpec::standard(50, 2024),
                };
                let n: u64 = v.parse().map_err(|_| num("an integer"))?;
                match key.trim() {
                    "corpus.columns_per_label" => spec.columns_per_label = n as usize,
                    "corpus.seed" => spec.seed = n,
                    "corpus.rows_min" => spec.rows_per_column.0 = n as usize,
                    _ => spec.rows_per_column.1 = n as usize,
                }
                self.corpus = CorpusSource::Synthetic(spec);
            }
            "fractions" | "fraction" => self.fractions = parse_list(v).map_err(|_| num("a list of numbers"))?,
            "templates" => self.templates = parse_list(v).map_err(|_| bad("a template list"))?,
            "eval_templates" => self.eval_templates = parse_list(v).map_err(|_| bad("a template list"))?,
            "seeds" => self.seeds = parse_list(v).map_err(|_| num("a list of integers"))?,
            "budget_k" => self.budget_k = v.parse().map_err(|_| num("an integer"))?,
            "max_new_tokens" => self.max_new_tokens = v.parse().map_err(|_| num("an integer"))?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "mode" => self.train.mode = v.parse()?,
            "lr" | "learning_rate" => self.train.learning_rate = v.parse().map_err(|_| num("a number"))?,
            "batch_size" => self.train.batch_size = v.parse().map_err(|_| num("an integer"))?,
            "epochs" | "max_epochs" => self.train.max_epochs = v.parse().map_err(|_| num("an integer"))?,
            "optimizer" => self.train.optimizer = v.parse()?,
            "early_stop_loss" => self.train.early_stop_loss = v.parse().map_err(|_| num("a number"))?,
            "rank" | "lora.rank" => self.train.lora.rank = v.parse().map_err(|_| num("an integer"))?,
            "alpha" | "lora.alpha" => self.train.lora.alpha = v.parse().map_err(|_| num("a number"))?,
            "lora.targets" => {
                self.train.lora.targets = v
                    .split(',')
                    .map(|s| MatrixId::parse(s.trim()).ok_or_else(|| bad("matrix names")))
                    .collect::<Result<_>>()?
            }
            "base.d_model" => self.base.d_model = v.parse().map_err(|_| num("an integer"))?,
            "base.n_layers" => self.base.n_layers = v.parse().map_err(|_| num("an integer"))?,
            "base.n_heads" => self.base.n_heads = v.parse().map_err(|_| num("an integer"))?,
            "base.d_ff" => self.base.d_ff = v.parse().map_err(|_| num("an integer"))?,
            "base.context_length" => self.base.context_length = v.parse().map_err(|_| num("an integer"))?,
            "base.columns_per_label" => self.base.columns_per_label = v.parse().map_err(|_| num("an integer"))?,
            "base.epochs" => self.base.epochs = v.parse().map_err(|_| num("an integer"))?,
            "base.lr" => self.base.learning_rate = v.parse().map_err(|_| num("a number"))?,
            "base.seed" => self.base.seed = v.parse().map_err(|_| num("an integer"))?,
            "base.held_out_labels" => self.base.held_out_labels = parse_list(v).map_err(|_| bad("a label list"))?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected `key = value`", path.display(), i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.fractions.is_empty() {
            return Err(Error::Config("fractions must not be empty".into()));
        }
        for &f in &self.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::FractionOutOfRange(f));
            }
        }
        if self.eval_templates.len() < 2 {
            return Err(Error::Config("at least two evaluation templates are needed".into()));
        }
        for t in self.templates.iter().chain(&self.eval_templates) {
            crate::prompt::template(t)?;
        }
        self.train.validate()
    }

    /// Hash of the configuration plus the code version. The output directory
    /// is left out so moving a run does not change its identity.
    pub fn fingerprint(&self) -> String {
        let cfg = ExperimentConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let body = serde_json::to_string(&(cfg, CODE_VERSION)).expect("config serializes");
        fingerprint(body.as_bytes())
    }

    pub fn prompt_budget(&self) -> usize {
        self.base.context_length.saturating_sub(1 + LABEL_RESERVE)
    }
}

/// One training configuration inside an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub fraction: f64,
    pub templates: Vec<String>,
    pub mode: TrainMode,
}

impl Arm {
    /// `toy-<fraction>-<LoRA|SFT><template digits>`, e.g. `toy-0.02-LoRA3`.
    pub fn name(&self) -> String {
        let digits: String = self.templates.iter().map(|t| t.trim_start_matches('p')).collect();
        let method = match self.mode {
            TrainMode::Lora => "LoRA",
            TrainMode::Sft => "SFT",
        };
        format!("toy-{}-{method}{digits}", format_fraction(self.fraction))
    }
}

pub fn format_fraction(f: f64) -> String {
    let s = format!("{f:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub train_columns: usize,
    pub train_prompts: usize,
    pub loss_history: Vec<f64>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub fingerprint: String,
    pub runs: Vec<ArmRun>,
    /// Seed-averaged report per arm, in arm order.
    pub averaged: Vec<EvalReport>,
}

impl ExperimentResult {
    pub fn averaged(&self, arm: &str) -> Option<&EvalReport> {
        self.averaged.iter().find(|r| r.name == arm)
    }

    pub fn table(&self) -> String {
        comparison_table(&self.averaged)
    }
}

pub fn training_dataset(
    corpus: &CorpusSplit,
    arm: &Arm,
    cfg: &ExperimentConfig,
    tokenizer: &Tokenizer,
    seed: u64,
) -> Result<(Vec<LabeledColumn>, Vec<PromptInstance>)> {
    let columns = stratified_select(&corpus.train, arm.fraction, derive_seed(seed, &["select"]))?;
    let mut build = crate::augment::DatasetBuildConfig::new(&[], derive_seed(seed, &["build"]));
    build.templates = arm.templates.clone();
    build.budget_k = cfg.budget_k;
    build.max_tokens = Some(cfg.prompt_budget());
    let data = build_dataset(&columns, &corpus.label_space, &build, Some(tokenizer))?;
    Ok((columns, data))
}

/// Evaluates a checkpoint on the test split under every evaluation template.
pub fn evaluate(
    ckpt: &Checkpoint,
    corpus: &CorpusSplit,
    cfg: &ExperimentConfig,
    name: &str,
    seed: u64,
) -> Result<EvalReport> {
    let build = eval_build_config(derive_seed(seed, &["eval"]), cfg.budget_k, Some(cfg.prompt_budget()));
    let mut records = BTreeMap::new();
    for t in &cfg.eval_templates {
        records.insert(
            t.clone(),
            predict_labels(ckpt, &corpus.test, &corpus.label_space, t, &build, cfg.max_new_tokens)?,
        );
    }
    sensitivity_report(name, &records, &cfg.fingerprint(), &[seed])
}

pub fn run_arm(
    corpus: &CorpusSplit,
    base: &Checkpoint,
    arm: &Arm,
    cfg: &ExperimentConfig,
    seed: u64,
    log: &mut dyn FnMut(&str),
) -> Result<(ArmRun, Checkpoint)> {
    let (columns, data) = training_dataset(corpus, arm, cfg, &base.tokenizer, seed)?;
    let tc = TrainConfig {
        mode: arm.mode,
        seed,
        ..cfg.train.clone()
    };
    let name = arm.name();
    let start = Instant::now();
    let ckpt = train(&data, &tc, base, |e, l| log(&format!("{name} seed {seed} epoch {} loss {l:.4}", e + 1)))?;
    log(&format!("{name} seed {seed}: trained in {:.1}s", start.elapsed().as_secs_f64()));
    let report = evaluate(&ckpt, corpus, cfg, &name, seed)?;
    Ok((
        ArmRun {
            arm: arm.clone(),
            seed,
            train_columns: columns.len(),
            train_prompts: data.len(),
            loss_history: ckpt.loss_history.clone(),
            report,
        },
        ckpt,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentName {
    SensitivitySmall,
    AugmentationSmall,
    Thirds,
    SftCase,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 4] = [
        ExperimentName::SensitivitySmall,
        ExperimentName::AugmentationSmall,
        ExperimentName::Thirds,
        ExperimentName::SftCase,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::SensitivitySmall => "sensitivity-small",
            ExperimentName::AugmentationSmall => "augmentation-small",
            ExperimentName::Thirds => "thirds",
            ExperimentName::SftCase => "sft-case",
        }
    }

    /// The arms each recipe trains.
    pub fn arms(self, cfg: &ExperimentConfig) -> Vec<Arm> {
        let single = vec!["p3".to_string()];
        let all: Vec<String> = ["p1", "p2", "p3"].iter().map(|s| s.to_string()).collect();
        let arm = |fraction: f64, templates: &Vec<String>, mode| Arm {
            fraction,
            templates: templates.clone(),
            mode,
        };
        match self {
            ExperimentName::SensitivitySmall => cfg
                .fractions
                .iter()
                .map(|&f| arm(f, &cfg.templates, cfg.train.mode))
                .collect(),
            ExperimentName::AugmentationSmall => cfg
                .fractions
                .iter()
                .flat_map(|&f| [arm(f, &single, TrainMode::Lora), arm(f, &all, TrainMode::Lora)])
                .collect(),
            ExperimentName::Thirds => vec![arm(1.0, &single, TrainMode::Lora), arm(1.0 / 3.0, &all, TrainMode::Lora)],
            ExperimentName::SftCase => vec![arm(1.0, &single, TrainMode::Sft), arm(1.0 / 3.0, &all, TrainMode::Sft)],
        }
    }
}

impl FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

/// Runs every arm of a recipe over every seed and averages across seeds.
pub fn run_experiment(
    name: ExperimentName,
    cfg: &ExperimentConfig,
    corpus: &CorpusSplit,
    base: &Checkpoint,
    log: &mut dyn FnMut(&str),
) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut runs = Vec::new();
    let mut averaged = Vec::new();
    for arm in name.arms(cfg) {
        let mut reports = Vec::new();
        for &seed in &cfg.seeds {
            let (run, _) = run_arm(corpus, base, &arm, cfg, seed, log)?;
            reports.push(run.report.clone());
            runs.push(run);
        }
        averaged.push(EvalReport::average(&arm.name(), &reports)?);
    }
    Ok(ExperimentResult {
        name: name.as_str().to_string(),
        fingerprint: cfg.fingerprint(),
        runs,
        averaged,
    })
}
