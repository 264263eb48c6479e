//! Stratified selection against an exact integer allocation oracle.

mod common;

use std::collections::BTreeMap;

use ctalab::sampling::{stratified_allocation, stratified_select};
use ctalab::table::{label_distribution, Column, ColumnSource, LabeledColumn};
use common::allocation_oracle as oracle;
use proptest::prelude::*;

fn columns(counts: &[usize]) -> Vec<LabeledColumn> {
    let mut out = Vec::new();
    for (li, &c) in counts.iter().enumerate() {
        for j in 0..c {
            out.push(LabeledColumn {
                column: Column::new(vec![format!("v{li}_{j}")], ColumnSource::new(format!("t{li}"), j)),
                label: format!("L{li}"),
            });
        }
    }
    // interleave labels so order preservation is meaningful
    out.sort_by_key(|lc| (lc.column.source.column, lc.label.clone()));
    out
}

#[test]
fn published_examples() {
    let counts: BTreeMap<String, usize> = [("A", 50), ("B", 30), ("C", 20)].map(|(l, c)| (l.to_string(), c)).into();
    let want: BTreeMap<String, usize> = [("A", 5), ("B", 3), ("C", 2)].map(|(l, c)| (l.to_string(), c)).into();
    assert_eq!(stratified_allocation(&counts, 0.1).unwrap(), want);
    let counts: BTreeMap<String, usize> = [("A", 3), ("B", 1)].map(|(l, c)| (l.to_string(), c)).into();
    let got = stratified_allocation(&counts, 0.5).unwrap();
    assert_eq!(got, oracle(&counts, 1, 2));
    assert_eq!((got["A"], got["B"]), (2, 0));
}

proptest! {
    #[test]
    fn allocation_equals_exact_oracle(
        counts in prop::collection::vec(0usize..60, 1..8),
        q in 1usize..=40,
        p_raw in 1usize..=40,
    ) {
        let p = p_raw.min(q);
        let map: BTreeMap<String, usize> = counts.iter().enumerate().map(|(i, &c)| (format!("L{i}"), c)).collect();
        let got = stratified_allocation(&map, p as f64 / q as f64).unwrap();
        prop_assert_eq!(&got, &oracle(&map, p, q));

        let train = columns(&counts);
        let picked = stratified_select(&train, p as f64 / q as f64, 17).unwrap();
        let dist = label_distribution(&picked);
        for (label, &want) in &got {
            prop_assert_eq!(dist.get(label).copied().unwrap_or(0), want);
            let n = map[label];
            if n as f64 * p as f64 >= q as f64 {
                prop_assert!(want >= 1, "label {} with {} columns vanished", label, n);
            }
        }
        // sub-sequence of the input
        let mut it = train.iter();
        for lc in &picked {
            prop_assert!(it.any(|x| x == lc));
        }
    }

    #[test]
    fn full_fraction_is_identity(counts in prop::collection::vec(0usize..30, 1..6), seed in any::<u64>()) {
        let train = columns(&counts);
        prop_assert_eq!(stratified_select(&train, 1.0, seed).unwrap(), train);
    }
}
