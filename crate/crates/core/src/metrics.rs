//! Per-label and gold-frequency-weighted F1.

use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    /// `2TP / (2TP + FP + FN)`; zero when there are no true positives.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }
}

/// One-vs-rest counts for every label that occurs as gold or prediction.
pub fn confusion_counts<G: AsRef<str>, P: AsRef<str>>(gold: &[G], pred: &[P]) -> BTreeMap<String, Counts> {
    assert_eq!(gold.len(), pred.len(), "gold and predicted lengths differ");
    let mut out: BTreeMap<String, Counts> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let (g, p) = (g.as_ref(), p.as_ref());
        if g == p {
            out.entry(g.to_string()).or_default().tp += 1;
        } else {
            out.entry(g.to_string()).or_default().fn_ += 1;
            out.entry(p.to_string()).or_default().fp += 1;
        }
    }
    out
}

/// F1 for each label seen in gold or predictions.
pub fn per_label_f1<G: AsRef<str>, P: AsRef<str>>(gold: &[G], pred: &[P]) -> BTreeMap<String, f64> {
    confusion_counts(gold, pred)
        .into_iter()
        .map(|(label, c)| (label, c.f1()))
        .collect()
}

/// `Σ (n_ℓ / N) F1_ℓ` with `n_ℓ` the gold count of label ℓ.
pub fn weighted_f1<G: AsRef<str>, P: AsRef<str>>(gold: &[G], pred: &[P]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let n = gold.len() as f64;
    confusion_counts(gold, pred)
        .values()
        .map(|c| c.support() as f64 / n * c.f1())
        .sum()
}

/// `max - min`; zero for fewer than one value.
pub fn spread(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if values.is_empty() {
        0.0
    } else {
        max - min
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean absolute deviation from the mean.
pub fn mean_abs_deviation(values: &[f64]) -> f64 {
    let m = mean(values);
    mean(&values.iter().map(|v| (v - m).abs()).collect::<Vec<_>>())
}
