//! Pipeline stages and the metadata sidecars that chain them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ctalab::augment::{dataset_to_string, deserialize_dataset, PromptInstance};
use ctalab::error::write_atomic;
use ctalab::eval::{comparison_table, eval_build_config, predict_labels, sensitivity_report, self_check, TemplateScores};
use ctalab::experiment::{
    load_or_build_base, run_experiment, training_dataset, Arm, CorpusSource, ExperimentConfig, ExperimentName,
};
use ctalab::model::Checkpoint;
use ctalab::seed::{derive_seed, fingerprint};
use ctalab::table::{CorpusSplit, MANIFEST_NAME};
use ctalab::trainer::{train, TrainConfig, TrainMode};
use ctalab::{Error, Result, CODE_VERSION};
use serde::{Deserialize, Serialize};

pub const META_FORMAT_VERSION: u32 = 1;

/// Sidecar written next to every stage output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    pub format_version: u32,
    pub stage: String,
    pub code_version: String,
    /// Identity of the artifact itself.
    pub fingerprint: String,
    pub config_fingerprint: String,
    /// Fingerprints of the inputs, keyed by stage.
    pub parents: BTreeMap<String, String>,
    pub arm: Option<Arm>,
    pub seed: Option<u64>,
}

impl StageMeta {
    fn new(stage: &str, fp: String, cfg: &ExperimentConfig) -> Self {
        Self {
            format_version: META_FORMAT_VERSION,
            stage: stage.to_string(),
            code_version: CODE_VERSION.to_string(),
            fingerprint: fp,
            config_fingerprint: cfg.fingerprint(),
            parents: BTreeMap::new(),
            arm: None,
            seed: None,
        }
    }

    fn parent(&self, stage: &str) -> Result<&str> {
        self.parents
            .get(stage)
            .map(String::as_str)
            .ok_or_else(|| Error::Fingerprint(format!("{} metadata lacks its {stage} fingerprint", self.stage)))
    }
}

pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut p = artifact.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

fn write_meta(artifact: &Path, meta: &StageMeta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta).expect("metadata serializes") + "\n";
    write_atomic(&meta_path(artifact), text.as_bytes())
}

fn read_meta(artifact: &Path, stage: &str) -> Result<StageMeta> {
    let path = meta_path(artifact);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: StageMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Fingerprint(format!("{}: unreadable metadata: {e}", path.display())))?;
    if meta.format_version != META_FORMAT_VERSION {
        return Err(Error::Fingerprint(format!(
            "{}: metadata format {} is not supported",
            path.display(),
            meta.format_version
        )));
    }
    if meta.stage != stage {
        return Err(Error::Fingerprint(format!(
            "{}: expected a {stage} artifact, found {}",
            path.display(),
            meta.stage
        )));
    }
    Ok(meta)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

pub fn corpus_fingerprint(corpus: &CorpusSplit) -> String {
    fingerprint(&serde_json::to_vec(corpus).expect("corpus serializes"))
}

/// Progress sink that echoes to stderr and optionally appends to a log file.
pub struct Logger {
    quiet: bool,
    file: Option<fs::File>,
}

impl Logger {
    pub fn new(quiet: bool) -> Self {
        Self { quiet, file: None }
    }

    fn to_file(&mut self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.file = Some(fs::File::create(path).map_err(|e| Error::io(path, e))?);
        Ok(())
    }

    pub fn log(&mut self, line: &str) {
        if !self.quiet {
            eprintln!("{line}");
        }
        if let Some(f) = self.file.as_mut() {
            let _ = writeln!(f, "{line}");
        }
    }
}

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub logger: Logger,
}

impl Ctx {
    fn corpus_dir(&self) -> PathBuf {
        self.out.join("corpus")
    }

    fn generator_fingerprint(&self) -> Option<String> {
        match &self.cfg.corpus {
            CorpusSource::Synthetic(spec) => Some(fingerprint(&serde_json::to_vec(spec).expect("spec serializes"))),
            CorpusSource::Manifest(_) => None,
        }
    }

    /// Loads the corpus the configuration points at. Synthetic corpora must
    /// have been written by `generate` with the same generator settings.
    pub fn load_corpus(&self) -> Result<(CorpusSplit, String)> {
        let corpus = match &self.cfg.corpus {
            CorpusSource::Manifest(p) => ctalab::table::load_labeled_corpus(p)?,
            CorpusSource::Synthetic(_) => {
                let manifest = self.corpus_dir().join(MANIFEST_NAME);
                if !manifest.exists() {
                    return Err(Error::MissingFile(manifest));
                }
                let meta = read_meta(&manifest, "corpus")?;
                if Some(meta.parent("generator")?) != self.generator_fingerprint().as_deref() {
                    return Err(Error::Fingerprint(format!(
                        "{} was generated with different settings; rerun `ctalab generate`",
                        manifest.display()
                    )));
                }
                let corpus = ctalab::table::load_labeled_corpus(&manifest)?;
                if corpus_fingerprint(&corpus) != meta.fingerprint {
                    return Err(Error::Fingerprint(format!("{} changed after generation", manifest.display())));
                }
                corpus
            }
        };
        let fp = corpus_fingerprint(&corpus);
        Ok((corpus, fp))
    }

    pub fn base(&mut self, corpus: &CorpusSplit) -> Result<Checkpoint> {
        let dir = self.out.join("base");
        let logger = &mut self.logger;
        load_or_build_base(&self.cfg.base, &corpus.label_space, &dir, &mut |l| logger.log(l))
    }
}

pub fn generate(ctx: &mut Ctx) -> Result<PathBuf> {
    let CorpusSource::Synthetic(spec) = &ctx.cfg.corpus else {
        return Err(Error::Config("generate needs a synthetic corpus; corpus.manifest is set".into()));
    };
    let corpus = ctalab::synthgen::generate_corpus(spec)?;
    let dir = ctx.corpus_dir();
    corpus.write_to_dir(&dir)?;
    let manifest = dir.join(MANIFEST_NAME);
    let mut meta = StageMeta::new("corpus", corpus_fingerprint(&corpus), &ctx.cfg);
    meta.parents.insert("generator".into(), ctx.generator_fingerprint().expect("synthetic"));
    write_meta(&manifest, &meta)?;
    ctx.logger.log(&format!(
        "corpus: {} train / {} validation / {} test columns over {} labels in {}",
        corpus.train.len(),
        corpus.validation.len(),
        corpus.test.len(),
        corpus.label_space.len(),
        dir.display()
    ));
    Ok(manifest)
}

pub fn base(ctx: &mut Ctx) -> Result<()> {
    let (corpus, _) = ctx.load_corpus()?;
    let ckpt = ctx.base(&corpus)?;
    ctx.logger.log(&format!(
        "base model: {} parameters, vocabulary {}",
        ckpt.model_config.parameter_count(),
        ckpt.tokenizer.vocab_size()
    ));
    Ok(())
}

pub fn build(ctx: &mut Ctx, arm: Arm, seed: u64) -> Result<PathBuf> {
    ctx.cfg.validate()?;
    let (corpus, corpus_fp) = ctx.load_corpus()?;
    let base = ctx.base(&corpus)?;
    let (columns, data) = training_dataset(&corpus, &arm, &ctx.cfg, &base.tokenizer, seed)?;
    let text = dataset_to_string(&data);
    let path = ctx.out.join("datasets").join(format!("{}-s{seed}.jsonl", arm.name()));
    write_text(&path, &text)?;
    let mut meta = StageMeta::new("dataset", fingerprint(text.as_bytes()), &ctx.cfg);
    meta.parents.insert("corpus".into(), corpus_fp);
    meta.parents.insert("base".into(), base.fingerprint.clone());
    meta.arm = Some(arm.clone());
    meta.seed = Some(seed);
    write_meta(&path, &meta)?;
    ctx.logger.log(&format!(
        "{}: {} prompts from {} columns -> {}",
        arm.name(),
        data.len(),
        columns.len(),
        path.display()
    ));
    Ok(path)
}

fn load_dataset(path: &Path) -> Result<(Vec<PromptInstance>, StageMeta)> {
    let meta = read_meta(path, "dataset")?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if fingerprint(&bytes) != meta.fingerprint {
        return Err(Error::Fingerprint(format!("{} changed after it was built", path.display())));
    }
    Ok((deserialize_dataset(path)?, meta))
}

pub fn train_stage(ctx: &mut Ctx, dataset: &Path, mode: Option<TrainMode>) -> Result<PathBuf> {
    ctx.cfg.validate()?;
    let (data, dmeta) = load_dataset(dataset)?;
    let (corpus, corpus_fp) = ctx.load_corpus()?;
    if dmeta.parent("corpus")? != corpus_fp {
        return Err(Error::Fingerprint(format!("{} was built from a different corpus", dataset.display())));
    }
    let base = ctx.base(&corpus)?;
    if dmeta.parent("base")? != base.fingerprint {
        return Err(Error::Fingerprint(format!("{} was built against a different base model", dataset.display())));
    }
    let mut arm = dmeta.arm.clone().ok_or_else(|| Error::Fingerprint("dataset metadata lacks its arm".into()))?;
    let seed = dmeta.seed.unwrap_or(ctx.cfg.seeds[0]);
    arm.mode = mode.unwrap_or(arm.mode);
    let tc = TrainConfig {
        mode: arm.mode,
        seed,
        ..ctx.cfg.train.clone()
    };
    let dir = ctx.out.join("runs").join(format!("{}-s{seed}", arm.name()));
    ctx.logger.to_file(&dir.join("train.log"))?;
    let name = arm.name();
    ctx.logger.log(&format!("{name}: {} prompts, mode {}, seed {seed}", data.len(), tc.mode.as_str()));
    let logger = &mut ctx.logger;
    let mut ckpt = train(&data, &tc, &base, |e, l| logger.log(&format!("epoch {} loss {l:.6}", e + 1)))?;
    let chain = serde_json::to_string(&(&dmeta.fingerprint, &base.fingerprint, &tc)).expect("serializes");
    ckpt.fingerprint = fingerprint(chain.as_bytes());
    let path = dir.join("checkpoint.json");
    ckpt.save(&path)?;
    let mut meta = StageMeta::new("checkpoint", ckpt.fingerprint.clone(), &ctx.cfg);
    meta.parents.insert("corpus".into(), corpus_fp);
    meta.parents.insert("base".into(), base.fingerprint.clone());
    meta.parents.insert("dataset".into(), dmeta.fingerprint.clone());
    meta.arm = Some(arm);
    meta.seed = Some(seed);
    write_meta(&path, &meta)?;
    ctx.logger.log(&format!("checkpoint -> {}", path.display()));
    Ok(path)
}

pub fn eval_stage(ctx: &mut Ctx, checkpoint: &Path, templates: Option<Vec<String>>) -> Result<PathBuf> {
    if let Some(t) = templates {
        ctx.cfg.eval_templates = t;
    }
    ctx.cfg.validate()?;
    let meta = read_meta(checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.fingerprint != meta.fingerprint {
        return Err(Error::Fingerprint(format!("{} does not match its metadata", checkpoint.display())));
    }
    let (corpus, corpus_fp) = ctx.load_corpus()?;
    if meta.parent("corpus")? != corpus_fp {
        return Err(Error::Fingerprint(format!("{} was trained on a different corpus", checkpoint.display())));
    }
    let seed = meta.seed.unwrap_or(ctx.cfg.seeds[0]);
    let name = meta.arm.as_ref().map(Arm::name).unwrap_or_else(|| "model".into());
    let build = eval_build_config(derive_seed(seed, &["eval"]), ctx.cfg.budget_k, Some(ctx.cfg.prompt_budget()));
    let dir = ctx.out.join("reports").join(format!("{name}-s{seed}"));
    let mut records = BTreeMap::new();
    for t in &ctx.cfg.eval_templates {
        let recs = predict_labels(&ckpt, &corpus.test, &corpus.label_space, t, &build, ctx.cfg.max_new_tokens)?;
        let scores = TemplateScores::from_records(&recs);
        ctx.logger.log(&format!("{name} {t}: weighted F1 {:.4} over {} columns", scores.weighted_f1, scores.n));
        let report = TemplateReport {
            model: name.clone(),
            template: t.clone(),
            fingerprint: ctx.cfg.fingerprint(),
            checkpoint: ckpt.fingerprint.clone(),
            scores,
        };
        write_text(&dir.join(format!("{t}.json")), &json(&report))?;
        let lines: String = recs.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect();
        write_text(&dir.join(format!("{t}.predictions.jsonl")), &lines)?;
        records.insert(t.clone(), recs);
    }
    let report = sensitivity_report(&name, &records, &ctx.cfg.fingerprint(), &[seed])?;
    self_check(&report)?;
    write_text(&dir.join("sensitivity.json"), &report.to_json())?;
    write_text(&dir.join("sensitivity.csv"), &report.to_csv())?;
    let table = comparison_table(std::slice::from_ref(&report));
    write_text(&dir.join("sensitivity.txt"), &table)?;
    print!("{table}");
    Ok(dir)
}

#[derive(Debug, Serialize)]
struct TemplateReport {
    model: String,
    template: String,
    fingerprint: String,
    checkpoint: String,
    scores: TemplateScores,
}

pub fn experiment(ctx: &mut Ctx, name: ExperimentName) -> Result<PathBuf> {
    ctx.cfg.validate()?;
    let dir = ctx.out.join("experiments").join(name.as_str());
    let (corpus, _) = ctx.load_corpus()?;
    ctx.logger.to_file(&dir.join("experiment.log"))?;
    let base = ctx.base(&corpus)?;
    let logger = &mut ctx.logger;
    let result = run_experiment(name, &ctx.cfg, &corpus, &base, &mut |l| logger.log(l))?;
    for report in &result.averaged {
        self_check(report)?;
        write_text(&dir.join(format!("{}.json", report.name)), &report.to_json())?;
        write_text(&dir.join(format!("{}.csv", report.name)), &report.to_csv())?;
    }
    write_text(&dir.join("result.json"), &json(&result))?;
    let table = result.table();
    write_text(&dir.join("table.txt"), &table)?;
    print!("{table}");
    Ok(dir)
}
