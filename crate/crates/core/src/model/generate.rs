use ndarray::Array1;

use super::{forward_train, Tokenizer, TransformerWeights};
use crate::error::{Error, Result};
use crate::lora::LoraAdapters;

/// Logits of the final position only.
pub fn forward_last(weights: &TransformerWeights, adapters: Option<&LoraAdapters>, ids: &[usize]) -> Result<Array1<f64>> {
    let last = ids.len().saturating_sub(1);
    let (logits, _) = forward_train(weights, adapters, ids, &[last])?;
    Ok(logits.row(0).to_owned())
}

/// Argmax decoding; ties go to the lowest id. The returned continuation
/// excludes the terminating `<eos>`. Decoding also stops when the context
/// window is full.
pub fn generate_greedy(
    weights: &TransformerWeights,
    adapters: Option<&LoraAdapters>,
    prompt_ids: &[usize],
    max_new_tokens: usize,
) -> Result<Vec<usize>> {
    let context = weights.config.context_length;
    if prompt_ids.len() > context {
        return Err(Error::SequenceTooLong {
            len: prompt_ids.len(),
            context,
        });
    }
    let mut ids = prompt_ids.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new_tokens && ids.len() < context {
        let logits = forward_last(weights, adapters, &ids)?;
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        if best == Tokenizer::EOS_ID {
            break;
        }
        out.push(best);
        ids.push(best);
    }
    Ok(out)
}
