use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Tokenizer, TransformerWeights};
use crate::error::{write_atomic, Error, Result};
use crate::lora::LoraAdapters;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Base weights only, no adapters and no fine-tuning record.
    Base,
    /// Frozen base plus separate adapter tensors.
    Adapted,
    /// Adapter-free weights (merged LoRA or full fine-tuning).
    Merged,
}

/// Self-describing JSON container for a model and its training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub model_config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub weights: TransformerWeights,
    pub adapters: Option<LoraAdapters>,
    pub train_config: Option<TrainConfig>,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    /// Fingerprint of the configuration chain that produced this file.
    pub fingerprint: String,
}

impl Checkpoint {
    pub fn base(tokenizer: Tokenizer, weights: TransformerWeights, fingerprint: String) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: CheckpointKind::Base,
            model_config: weights.config,
            tokenizer,
            weights,
            adapters: None,
            train_config: None,
            epoch: 0,
            loss_history: Vec::new(),
            fingerprint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.weights.config != self.model_config {
            return Err(Error::Checkpoint("weights were built for a different model config".into()));
        }
        self.model_config.validate()?;
        self.weights.validate_shapes()?;
        if self.tokenizer.vocab_size() != self.model_config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "tokenizer has {} tokens but the model expects {}",
                self.tokenizer.vocab_size(),
                self.model_config.vocab_size
            )));
        }
        match (&self.adapters, self.kind) {
            (Some(set), CheckpointKind::Adapted) => set.check_against(&self.weights)?,
            (None, CheckpointKind::Adapted) => return Err(Error::Checkpoint("adapted checkpoint without adapters".into())),
            (Some(_), _) => return Err(Error::Checkpoint("adapters present in an adapter-free checkpoint".into())),
            (None, _) => {}
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let bytes = serde_json::to_vec(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut ckpt: Checkpoint =
            serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        ckpt.tokenizer.reindex();
        ckpt.validate()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{inject, LoraConfig};

    fn sample() -> Checkpoint {
        let tok = Tokenizer::build(&["a b c d"]).unwrap();
        let config = ModelConfig {
            vocab_size: tok.vocab_size(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            context_length: 8,
        };
        let weights = TransformerWeights::init(config, 3).unwrap();
        Checkpoint::base(tok, weights, "f".into())
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut ckpt = sample();
        ckpt.adapters = Some(
            inject(
                &ckpt.weights,
                &LoraConfig {
                    rank: 2,
                    alpha: 2.0,
                    ..LoraConfig::default()
                },
                1,
            )
            .unwrap(),
        );
        ckpt.kind = CheckpointKind::Adapted;
        ckpt.loss_history = vec![1.25, 0.1 + 0.2];
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.tokenizer.encode("b a"), ckpt.tokenizer.encode("b a"));
    }

    #[test]
    fn rejects_mismatched_shapes_and_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let ckpt = sample();
        ckpt.save(&path).unwrap();

        let mut raw: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        raw["model_config"]["d_model"] = 10.into();
        raw["weights"]["config"]["d_model"] = 10.into();
        std::fs::write(&path, serde_json::to_vec(&raw).unwrap()).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        let mut v = ckpt.clone();
        v.format_version = 99;
        let bytes = serde_json::to_vec(&v).unwrap();
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));

        assert!(matches!(Checkpoint::load(&dir.path().join("none.json")), Err(Error::MissingFile(_))));
    }
}
