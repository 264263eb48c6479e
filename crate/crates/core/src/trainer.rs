//! Token-level cross-entropy on target labels, gradients, and the training
//! loop in adapter-only (LoRA) or full-parameter (SFT) mode.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::PromptInstance;
use crate::error::{Error, Result};
use crate::lora::{inject, LoraAdapters, LoraConfig};
use crate::model::{backward, forward_train, Checkpoint, CheckpointKind, Gradients, Tokenizer, TransformerWeights};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    Lora,
    Sft,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Lora => "lora",
            TrainMode::Sft => "sft",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lora" => Ok(TrainMode::Lora),
            "sft" => Ok(TrainMode::Sft),
            _ => Err(Error::Config(format!("unknown training mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub lora: LoraConfig,
    /// Training stops after an epoch whose mean loss is below this.
    pub early_stop_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Lora,
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 10,
            seed: 42,
            optimizer: OptimizerKind::Adam,
            lora: LoraConfig::default(),
            early_stop_loss: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Mean over masked positions of `-log softmax(logits[t])[target[t]]`.
pub fn token_cross_entropy_loss(logits: &Array2<f64>, target_ids: &[usize], loss_mask: &[bool]) -> Result<f64> {
    if logits.nrows() != target_ids.len() || target_ids.len() != loss_mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.nrows(),
            target_ids.len(),
            loss_mask.len()
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((row, &target), _) in logits.rows().into_iter().zip(target_ids).zip(loss_mask).filter(|(_, &m)| m) {
        total += nll(row.as_slice().expect("row-major"), target);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / n as f64)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn nll(row: &[f64], target: usize) -> f64 {
    log_sum_exp(row) - row[target]
}

/// A prompt/label pair in token form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    /// `<bos> prompt label` (the final `<eos>` is only ever a target).
    pub input_ids: Vec<usize>,
    /// Positions whose next token is supervised.
    pub positions: Vec<usize>,
    /// Label tokens then `<eos>`.
    pub targets: Vec<usize>,
}

pub fn encode_prompt(tokenizer: &Tokenizer, prompt: &str) -> Vec<usize> {
    let mut ids = vec![Tokenizer::BOS_ID];
    ids.extend(tokenizer.encode(prompt));
    ids
}

pub fn encode_example(tokenizer: &Tokenizer, prompt: &str, label: &str, context: usize) -> Result<EncodedExample> {
    let mut input_ids = encode_prompt(tokenizer, prompt);
    let start = input_ids.len() - 1;
    let mut targets = tokenizer.encode(label);
    targets.push(Tokenizer::EOS_ID);
    input_ids.extend(&targets[..targets.len() - 1]);
    if input_ids.len() > context {
        return Err(Error::SequenceTooLong {
            len: input_ids.len(),
            context,
        });
    }
    let positions = (start..start + targets.len()).collect();
    Ok(EncodedExample {
        input_ids,
        positions,
        targets,
    })
}

/// Loss summed over one example's target tokens, with the gradient of that
/// sum scaled by `scale`.
fn example_gradients(
    weights: &TransformerWeights,
    adapters: Option<&LoraAdapters>,
    ex: &EncodedExample,
    with_base: bool,
    scale: f64,
) -> Result<(f64, Gradients)> {
    let (logits, cache) = forward_train(weights, adapters, &ex.input_ids, &ex.positions)?;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, &target) in ex.targets.iter().enumerate() {
        let row = logits.row(i);
        let row = row.as_slice().expect("row-major");
        let lse = log_sum_exp(row);
        loss += lse - row[target];
        for (j, &z) in row.iter().enumerate() {
            dlogits[[i, j]] = (z - lse).exp() * scale;
        }
        dlogits[[i, target]] -= scale;
    }
    Ok((loss, backward(weights, adapters, &cache, &dlogits, with_base)))
}

/// Mean target-token loss over a batch and its exact gradient. Examples are
/// processed in parallel and summed in input order, so the result does not
/// depend on the thread count.
pub fn gradients(
    weights: &TransformerWeights,
    adapters: Option<&LoraAdapters>,
    batch: &[EncodedExample],
    with_base: bool,
) -> Result<(f64, Gradients)> {
    let n_tokens: usize = batch.iter().map(|e| e.targets.len()).sum();
    if n_tokens == 0 {
        return Err(Error::EmptyMask);
    }
    let scale = 1.0 / n_tokens as f64;
    let parts: Vec<(f64, Gradients)> = batch
        .par_iter()
        .map(|ex| example_gradients(weights, adapters, ex, with_base, scale))
        .collect::<Result<_>>()?;
    let mut total = Gradients::zeros(weights, adapters, with_base);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    Ok((loss * scale, total))
}

/// Mean target-token loss without gradients.
pub fn dataset_loss(weights: &TransformerWeights, adapters: Option<&LoraAdapters>, examples: &[EncodedExample]) -> Result<f64> {
    let parts: Vec<(f64, usize)> = examples
        .par_iter()
        .map(|ex| {
            let (logits, _) = forward_train(weights, adapters, &ex.input_ids, &ex.positions)?;
            let s: f64 = ex
                .targets
                .iter()
                .enumerate()
                .map(|(i, &t)| nll(logits.row(i).as_slice().expect("row-major"), t))
                .sum();
            Ok((s, ex.targets.len()))
        })
        .collect::<Result<_>>()?;
    let (s, n) = parts.iter().fold((0.0, 0), |(a, b), (s, n)| (a + s, b + n));
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(s / n as f64)
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: OptimizerKind, lr: f64, shapes: &[usize]) -> Self {
        let zeros = |on: bool| if on { shapes.iter().map(|&n| vec![0.0; n]).collect() } else { Vec::new() };
        Self {
            kind,
            lr,
            step: 0,
            m: zeros(kind == OptimizerKind::Adam),
            v: zeros(kind == OptimizerKind::Adam),
        }
    }

    fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        self.step += 1;
        if self.lr == 0.0 {
            return;
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (x, d) in p.iter_mut().zip(g) {
                        *x -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - Self::BETA1.powi(self.step);
                let c2 = 1.0 - Self::BETA2.powi(self.step);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..p.len() {
                        m[j] = Self::BETA1 * m[j] + (1.0 - Self::BETA1) * g[j];
                        v[j] = Self::BETA2 * v[j] + (1.0 - Self::BETA2) * g[j] * g[j];
                        p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
                    }
                }
            }
        }
    }
}

fn flat_grads(grads: &Gradients, mode: TrainMode) -> Vec<&[f64]> {
    match mode {
        TrainMode::Sft => grads
            .base
            .as_ref()
            .expect("base gradients in SFT mode")
            .tensors()
            .into_iter()
            .map(|(_, t)| t)
            .collect(),
        TrainMode::Lora => grads
            .adapters
            .iter()
            .flat_map(|(a, b)| [a.as_slice().expect("standard layout"), b.as_slice().expect("standard layout")])
            .collect(),
    }
}

/// Fine-tunes `base` on `dataset`. LoRA mode trains fresh adapters over the
/// frozen base weights and returns an adapted checkpoint; SFT mode updates
/// every base tensor and returns a merged checkpoint. `on_epoch` sees each
/// epoch's index and mean batch loss.
pub fn train(
    dataset: &[PromptInstance],
    cfg: &TrainConfig,
    base: &Checkpoint,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Checkpoint> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    cfg.validate()?;
    if base.kind == CheckpointKind::Adapted {
        return Err(Error::Checkpoint("merge adapters before further training".into()));
    }
    let context = base.model_config.context_length;
    let examples: Vec<EncodedExample> = dataset
        .iter()
        .map(|inst| encode_example(&base.tokenizer, &inst.input_text, &inst.target_label, context))
        .collect::<Result<_>>()?;

    let mut weights = base.weights.clone();
    let mut adapters = match cfg.mode {
        TrainMode::Lora => Some(inject(&weights, &cfg.lora, cfg.seed)?),
        TrainMode::Sft => None,
    };
    let shapes: Vec<usize> = match &adapters {
        Some(set) => set.tensors().iter().map(|(_, t)| t.len()).collect(),
        None => weights.tensors().iter().map(|(_, t)| t.len()).collect(),
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &shapes);
    let with_base = cfg.mode == TrainMode::Sft;

    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let mut rng = rng_for(cfg.seed, &["epoch", &epoch.to_string()]);
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<EncodedExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grads) = gradients(&weights, adapters.as_ref(), &batch, with_base)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { loss, epoch, batch: bi });
            }
            batch_losses.push(loss);
            let flat = flat_grads(&grads, cfg.mode);
            let params: Vec<&mut [f64]> = match adapters.as_mut() {
                Some(set) => set.tensors_mut().into_iter().map(|(_, t)| t).collect(),
                None => weights.tensors_mut().into_iter().map(|(_, t)| t).collect(),
            };
            opt.update(params, flat);
        }
        let mean = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        history.push(mean);
        on_epoch(epoch, mean);
        if mean < cfg.early_stop_loss {
            break;
        }
    }

    Ok(Checkpoint {
        kind: if adapters.is_some() {
            CheckpointKind::Adapted
        } else {
            CheckpointKind::Merged
        },
        weights,
        adapters,
        train_config: Some(cfg.clone()),
        epoch: history.len(),
        loss_history: history,
        ..base.clone()
    })
}
