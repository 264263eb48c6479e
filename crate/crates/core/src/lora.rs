//! Low-rank adapters on frozen projection matrices.
//!
//! An adapter on `W` (shape `d_out × d_in`) holds `A` (`d_out × r`) and `B`
//! (`r × d_in`); the adapted projection uses `W + (alpha / r) · A B`. `A`
//! starts Gaussian and `B` starts at zero, so a fresh adapter leaves the
//! model unchanged.

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MatrixId, TransformerWeights};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<MatrixId>,
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 16.0,
            targets: vec![MatrixId::Query, MatrixId::Value],
            init_std: 0.02,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdapterTarget {
    pub layer: usize,
    pub matrix: MatrixId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: AdapterTarget,
    /// `d_out × r`
    pub a: Array2<f64>,
    /// `r × d_in`
    pub b: Array2<f64>,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    /// `A B` without scaling.
    pub fn delta(&self) -> Array2<f64> {
        self.a.dot(&self.b)
    }
}

/// The adapters attached to one model, with their shared rank and alpha.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapters {
    pub rank: usize,
    pub alpha: f64,
    pub adapters: Vec<LoraAdapter>,
}

impl LoraAdapters {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn get(&self, layer: usize, matrix: MatrixId) -> Option<(usize, &LoraAdapter)> {
        self.adapters
            .iter()
            .enumerate()
            .find(|(_, ad)| ad.target.layer == layer && ad.target.matrix == matrix)
    }

    /// Verifies every adapter's shape against the model it is attached to.
    pub fn check_against(&self, weights: &TransformerWeights) -> Result<()> {
        for ad in &self.adapters {
            let layer = weights
                .layers
                .get(ad.target.layer)
                .ok_or_else(|| Error::ShapeMismatch(format!("adapter targets missing layer {}", ad.target.layer)))?;
            let w = layer.matrix(ad.target.matrix);
            check_shapes(w, ad)?;
            if ad.rank() != self.rank {
                return Err(Error::ShapeMismatch(format!(
                    "adapter rank {} differs from set rank {}",
                    ad.rank(),
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// Flat views of every trainable tensor, `A` then `B` per adapter.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for ad in &self.adapters {
            let name = format!("lora.{}.{}", ad.target.layer, ad.target.matrix.as_str());
            out.push((format!("{name}.a"), ad.a.as_slice().expect("standard layout")));
            out.push((format!("{name}.b"), ad.b.as_slice().expect("standard layout")));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for ad in &mut self.adapters {
            let name = format!("lora.{}.{}", ad.target.layer, ad.target.matrix.as_str());
            out.push((format!("{name}.a"), ad.a.as_slice_mut().expect("standard layout")));
            out.push((format!("{name}.b"), ad.b.as_slice_mut().expect("standard layout")));
        }
        out
    }
}

fn check_shapes(w: &Array2<f64>, ad: &LoraAdapter) -> Result<()> {
    let (d_out, d_in) = w.dim();
    let r = ad.a.ncols();
    if ad.a.nrows() != d_out || ad.b.dim() != (r, d_in) {
        return Err(Error::ShapeMismatch(format!(
            "W {d_out}x{d_in} with A {:?} and B {:?}",
            ad.a.dim(),
            ad.b.dim()
        )));
    }
    Ok(())
}

/// Creates one zero-effect adapter per target matrix per layer.
pub fn inject(weights: &TransformerWeights, cfg: &LoraConfig, seed: u64) -> Result<LoraAdapters> {
    if cfg.rank == 0 || !(cfg.alpha > 0.0) || !(cfg.init_std >= 0.0) {
        return Err(Error::InvalidConfig("LoRA rank, alpha, and init_std must be positive".into()));
    }
    let mut rng = rng_for(seed, &["lora_init"]);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut targets = cfg.targets.clone();
    targets.sort();
    targets.dedup();
    let mut adapters = Vec::new();
    for (layer, lw) in weights.layers.iter().enumerate() {
        for &matrix in &targets {
            let (d_out, d_in) = lw.matrix(matrix).dim();
            let min_dim = d_out.min(d_in);
            if cfg.rank >= min_dim {
                return Err(Error::RankTooLarge { rank: cfg.rank, min_dim });
            }
            adapters.push(LoraAdapter {
                target: AdapterTarget { layer, matrix },
                a: Array2::from_shape_simple_fn((d_out, cfg.rank), || normal.sample(&mut rng)),
                b: Array2::zeros((cfg.rank, d_in)),
            });
        }
    }
    Ok(LoraAdapters {
        rank: cfg.rank,
        alpha: cfg.alpha,
        adapters,
    })
}

/// `W + (alpha / r) · A B`.
pub fn effective_weight(w: &Array2<f64>, adapter: &LoraAdapter, alpha: f64, rank: usize) -> Result<Array2<f64>> {
    check_shapes(w, adapter)?;
    if adapter.rank() != rank {
        return Err(Error::ShapeMismatch(format!("adapter rank {} != {rank}", adapter.rank())));
    }
    let mut out = w.clone();
    out.scaled_add(alpha / rank as f64, &adapter.delta());
    Ok(out)
}

/// Folds every adapter into a copy of the base weights.
pub fn merge(weights: &TransformerWeights, adapters: &LoraAdapters) -> Result<TransformerWeights> {
    adapters.check_against(weights)?;
    let mut merged = weights.clone();
    for ad in &adapters.adapters {
        let target = merged.layers[ad.target.layer].matrix_mut(ad.target.matrix);
        *target = effective_weight(target, ad, adapters.alpha, adapters.rank)?;
    }
    Ok(merged)
}

/// `Σ r · (d_out + d_in)` over adapters.
pub fn trainable_param_count(adapters: &LoraAdapters) -> usize {
    adapters.adapters.iter().map(|ad| ad.a.len() + ad.b.len()).sum()
}
