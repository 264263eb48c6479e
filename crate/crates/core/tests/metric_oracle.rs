//! Per-label and weighted F1 against a full confusion matrix built by hand.

mod common;

use common::{f1_oracle, random_f1_case};
use ctalab::metrics::{per_label_f1, weighted_f1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_confusion_matrix_oracle_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..1000 {
        let (gold, pred) = random_f1_case(&mut rng);
        let want = f1_oracle(&gold, &pred);
        assert_eq!(per_label_f1(&gold, &pred), want.per_label, "case {case}");
        assert_eq!(weighted_f1(&gold, &pred), want.weighted, "case {case}");
    }
}

#[test]
fn hand_checkable_case() {
    let gold = ["A", "A", "B"].map(String::from);
    let pred = ["A", "B", "B"].map(String::from);
    assert!((weighted_f1(&gold, &pred) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(weighted_f1(&gold, &pred), f1_oracle(&gold, &pred).weighted);
}
