//! Oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use ctalab::lora::{inject, LoraConfig};
use ctalab::model::{MatrixId, ModelConfig, Tokenizer, TransformerWeights};
use ctalab::seed::rng_for;
use ctalab::trainer::{dataset_loss, encode_example, gradients, EncodedExample};
use rand::Rng;

pub const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

pub const ALL_TARGETS: [MatrixId; 6] = [
    MatrixId::Query,
    MatrixId::Key,
    MatrixId::Value,
    MatrixId::Output,
    MatrixId::FfIn,
    MatrixId::FfOut,
];

/// d_model 32, one layer, with layer-norm parameters moved off their 1/0
/// init so their gradients are generic.
pub fn gradcheck_setup() -> (TransformerWeights, Vec<EncodedExample>) {
    let tok = Tokenizer::build(&["Column: ['red', 'blue'] Labels: Color, City Answer:"]).unwrap();
    let config = ModelConfig {
        vocab_size: tok.vocab_size(),
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        d_ff: 64,
        context_length: 24,
    };
    let mut weights = TransformerWeights::init(config, 11).unwrap();
    let mut rng = rng_for(3, &["perturb"]);
    for (name, t) in weights.tensors_mut() {
        if name.contains("norm") {
            t.iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
        }
    }
    let examples = vec![
        encode_example(&tok, "Column: ['red', 'blue'] Labels: Color, City Answer:", "Color", 24).unwrap(),
        encode_example(&tok, "Column: ['Paris'] Labels: Color, City Answer:", "City", 24).unwrap(),
    ];
    (weights, examples)
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Worst relative error over every base tensor entry, with its location.
pub fn base_gradient_error() -> (f64, String) {
    let (mut weights, examples) = gradcheck_setup();
    let (_, grads) = gradients(&weights, None, &examples, true).unwrap();
    let base = grads.base.unwrap();
    let analytic: Vec<(String, Vec<f64>)> = base.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();
    let mut worst = (0.0, String::new());
    for (k, (name, g)) in analytic.iter().enumerate() {
        for j in 0..g.len() {
            let orig = weights.tensors()[k].1[j];
            weights.tensors_mut()[k].1[j] = orig + H;
            let up = dataset_loss(&weights, None, &examples).unwrap();
            weights.tensors_mut()[k].1[j] = orig - H;
            let down = dataset_loss(&weights, None, &examples).unwrap();
            weights.tensors_mut()[k].1[j] = orig;
            let e = rel(g[j], (up - down) / (2.0 * H));
            if e > worst.0 {
                worst = (e, format!("{name}[{j}]"));
            }
        }
    }
    worst
}

/// Worst relative error over both factors of adapters on all six targets,
/// with B randomised so A receives a nonzero gradient.
pub fn adapter_gradient_error() -> f64 {
    let (weights, examples) = gradcheck_setup();
    let cfg = LoraConfig {
        rank: 4,
        alpha: 8.0,
        targets: ALL_TARGETS.to_vec(),
        init_std: 0.1,
    };
    let mut set = inject(&weights, &cfg, 5).unwrap();
    let mut rng = rng_for(9, &["b"]);
    for ad in &mut set.adapters {
        ad.b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
    let (_, grads) = gradients(&weights, Some(&set), &examples, false).unwrap();
    assert!(grads.base.is_none());
    let mut worst = 0.0f64;
    for (i, (da, db)) in grads.adapters.iter().enumerate() {
        for (which, g) in [(0, da), (1, db)] {
            for j in 0..g.len() {
                let bump = |delta: f64| {
                    let mut s = set.clone();
                    let t = if which == 0 { &mut s.adapters[i].a } else { &mut s.adapters[i].b };
                    t.as_slice_mut().unwrap()[j] += delta;
                    dataset_loss(&weights, Some(&s), &examples).unwrap()
                };
                let num = (bump(H) - bump(-H)) / (2.0 * H);
                worst = worst.max(rel(g.as_slice().unwrap()[j], num));
            }
        }
    }
    worst
}

pub struct F1Oracle {
    pub per_label: BTreeMap<String, f64>,
    pub weighted: f64,
}

/// Per-label and gold-weighted F1 read off a full confusion matrix.
pub fn f1_oracle(gold: &[String], pred: &[String]) -> F1Oracle {
    let labels: Vec<&String> = gold.iter().chain(pred).collect::<BTreeSet<_>>().into_iter().collect();
    let idx: BTreeMap<&String, usize> = labels.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let k = labels.len();
    let mut m = vec![vec![0usize; k]; k];
    for (g, p) in gold.iter().zip(pred) {
        m[idx[g]][idx[p]] += 1;
    }
    let n = gold.len() as f64;
    let mut per_label = BTreeMap::new();
    let mut weighted = 0.0;
    for (i, label) in labels.iter().enumerate() {
        let tp = m[i][i];
        let fp: usize = (0..k).filter(|&g| g != i).map(|g| m[g][i]).sum();
        let fn_: usize = (0..k).filter(|&p| p != i).map(|p| m[i][p]).sum();
        let den = 2 * tp + fp + fn_;
        let f1 = if den == 0 { 0.0 } else { (2 * tp) as f64 / den as f64 };
        per_label.insert((*label).clone(), f1);
        let support: usize = m[i].iter().sum();
        weighted += support as f64 / n * f1;
    }
    F1Oracle { per_label, weighted }
}

/// Random gold/predicted pairs: sizes 1..=200, 2..=20 labels, skewed gold,
/// predictions right about half the time.
pub fn random_f1_case(rng: &mut impl Rng) -> (Vec<String>, Vec<String>) {
    let n = rng.random_range(1..=200);
    let k = rng.random_range(2..=20);
    let gold: Vec<String> = (0..n)
        .map(|_| format!("L{}", rng.random_range(0..k).min(rng.random_range(0..k))))
        .collect();
    let pred = gold
        .iter()
        .map(|g| if rng.random_bool(0.5) { g.clone() } else { format!("L{}", rng.random_range(0..k)) })
        .collect();
    (gold, pred)
}

/// Largest remainder for fraction `p/q` in integers: floors first, leftover
/// seats by remainder, then by label frequency, then by name.
pub fn allocation_oracle(counts: &BTreeMap<String, usize>, p: usize, q: usize) -> BTreeMap<String, usize> {
    let n: usize = counts.values().sum();
    let total = (2 * n * p + q) / (2 * q);
    let mut alloc: BTreeMap<String, usize> = counts.iter().map(|(l, &c)| (l.clone(), c * p / q)).collect();
    let mut left = total - alloc.values().sum::<usize>();
    let mut order: Vec<(&String, usize, usize)> = counts.iter().map(|(l, &c)| (l, (c * p) % q, c)).collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.cmp(&a.2)).then(a.0.cmp(b.0)));
    for (label, _, _) in order {
        if left == 0 {
            break;
        }
        *alloc.get_mut(label).unwrap() += 1;
        left -= 1;
    }
    alloc
}
