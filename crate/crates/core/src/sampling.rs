//! Column-value sampling strategies and stratified column selection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::table::{Column, LabeledColumn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SamplingKind {
    /// Longest values first.
    Archetype,
    /// Uniform without replacement.
    Random,
    /// Shortest values first.
    Shortest,
}

impl SamplingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingKind::Archetype => "archetype",
            SamplingKind::Random => "random",
            SamplingKind::Shortest => "shortest",
        }
    }
}

impl fmt::Display for SamplingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "archetype" => Ok(SamplingKind::Archetype),
            "random" => Ok(SamplingKind::Random),
            "shortest" => Ok(SamplingKind::Shortest),
            _ => Err(Error::Config(format!("unknown sampling kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    pub kind: SamplingKind,
    pub budget_k: usize,
    /// Only read by [`SamplingKind::Random`].
    pub seed: u64,
}

impl SamplingStrategy {
    pub fn new(kind: SamplingKind, budget_k: usize, seed: u64) -> Self {
        Self {
            kind,
            budget_k,
            seed,
        }
    }
}

/// Picks `min(budget_k, |column|)` values and returns them in row order.
pub fn sample_values(column: &Column, strategy: &SamplingStrategy) -> Result<Vec<String>> {
    if column.is_empty() {
        return Err(Error::EmptyColumn(column.source.to_string()));
    }
    if strategy.budget_k == 0 {
        return Err(Error::Config("sampling budget_k must be at least 1".into()));
    }
    let n = column.len();
    let k = strategy.budget_k.min(n);
    let mut chosen: Vec<usize> = match strategy.kind {
        SamplingKind::Archetype | SamplingKind::Shortest => {
            let mut order: Vec<usize> = (0..n).collect();
            let lengths: Vec<usize> = column.values.iter().map(|v| v.chars().count()).collect();
            if strategy.kind == SamplingKind::Archetype {
                order.sort_by_key(|&i| (std::cmp::Reverse(lengths[i]), i));
            } else {
                order.sort_by_key(|&i| (lengths[i], i));
            }
            order.truncate(k);
            order
        }
        SamplingKind::Random => {
            let mut rng = rng_for(strategy.seed, &["sample_values"]);
            index::sample(&mut rng, n, k).into_vec()
        }
    };
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| column.values[i].clone()).collect())
}

/// Hamilton apportionment of `total` seats over fractional `quotas`.
///
/// Each item first gets `floor(quota)`; remaining seats go to the largest
/// fractional remainders, with equal remainders ordered by `tie_rank`
/// (smaller rank wins).
pub fn largest_remainder(quotas: &[f64], total: usize, tie_rank: &[usize]) -> Vec<usize> {
    const EPS: f64 = 1e-9;
    debug_assert_eq!(quotas.len(), tie_rank.len());
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + EPS).floor().max(0.0) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remaining = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    let remainder = |i: usize| quotas[i] - counts[i] as f64;
    let rems: Vec<f64> = order.iter().map(|&i| remainder(i)).collect();
    order.sort_by(|&a, &b| {
        if (rems[a] - rems[b]).abs() <= EPS {
            tie_rank[a].cmp(&tie_rank[b])
        } else {
            rems[b].total_cmp(&rems[a])
        }
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

/// Per-label allocation of `fraction * n_label` columns. Ties toward the
/// more frequent label, then the lexicographically smaller one.
pub fn stratified_allocation(counts: &BTreeMap<String, usize>, fraction: f64) -> Result<BTreeMap<String, usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::FractionOutOfRange(fraction));
    }
    let labels: Vec<&String> = counts.keys().collect();
    let quotas: Vec<f64> = labels.iter().map(|l| counts[*l] as f64 * fraction).collect();
    let n: usize = counts.values().sum();
    let total = ((n as f64 * fraction) + 1e-9).round() as usize;
    let mut by_priority: Vec<usize> = (0..labels.len()).collect();
    by_priority.sort_by(|&a, &b| counts[labels[b]].cmp(&counts[labels[a]]).then(labels[a].cmp(labels[b])));
    let mut tie_rank = vec![0; labels.len()];
    for (rank, &i) in by_priority.iter().enumerate() {
        tie_rank[i] = rank;
    }
    let alloc = largest_remainder(&quotas, total, &tie_rank);
    Ok(labels.into_iter().cloned().zip(alloc).collect())
}

/// Selects a label-stratified subset of `train`, keeping the input order.
pub fn stratified_select(train: &[LabeledColumn], fraction: f64, seed: u64) -> Result<Vec<LabeledColumn>> {
    let counts = crate::table::label_distribution(train);
    let alloc = stratified_allocation(&counts, fraction)?;
    let mut keep = vec![false; train.len()];
    for (label, &want) in &alloc {
        let members: Vec<usize> = train
            .iter()
            .enumerate()
            .filter(|(_, lc)| &lc.label == label)
            .map(|(i, _)| i)
            .collect();
        let mut rng = rng_for(seed, &["stratified_select", label]);
        for j in index::sample(&mut rng, members.len(), want) {
            keep[members[j]] = true;
        }
    }
    Ok(train
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(lc, _)| lc.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{label_distribution, ColumnSource};
    use proptest::prelude::*;

    fn column(values: &[&str]) -> Column {
        Column::new(values.iter().map(|v| v.to_string()).collect(), ColumnSource::new("t", 0))
    }

    fn strat(kind: SamplingKind, k: usize, seed: u64) -> SamplingStrategy {
        SamplingStrategy::new(kind, k, seed)
    }

    #[test]
    fn shortest_and_archetype() {
        let c = column(&["London", "NYC", "Rio de Janeiro"]);
        assert_eq!(
            sample_values(&c, &strat(SamplingKind::Shortest, 2, 0)).unwrap(),
            vec!["London", "NYC"]
        );
        let c = column(&["NYC", "Rio de Janeiro", "London"]);
        assert_eq!(
            sample_values(&c, &strat(SamplingKind::Archetype, 1, 0)).unwrap(),
            vec!["Rio de Janeiro"]
        );
    }

    #[test]
    fn length_ties_prefer_earlier_rows() {
        let c = column(&["bb", "aa", "c", "dd"]);
        assert_eq!(sample_values(&c, &strat(SamplingKind::Archetype, 2, 0)).unwrap(), vec!["bb", "aa"]);
        assert_eq!(sample_values(&c, &strat(SamplingKind::Shortest, 2, 0)).unwrap(), vec!["bb", "c"]);
    }

    #[test]
    fn characters_not_bytes() {
        let c = column(&["ééé", "abcd"]);
        assert_eq!(sample_values(&c, &strat(SamplingKind::Shortest, 1, 0)).unwrap(), vec!["ééé"]);
    }

    #[test]
    fn random_golden() {
        let c = column(&["a", "b", "c", "d"]);
        let got = sample_values(&c, &strat(SamplingKind::Random, 2, 42)).unwrap();
        // frozen from the ChaCha8 stream; changes here mean the sampler moved
        assert_eq!(got, vec!["a", "b"]);
    }

    #[test]
    fn budget_larger_than_column_and_empty_column() {
        let c = column(&["x", "y"]);
        for kind in [SamplingKind::Archetype, SamplingKind::Random, SamplingKind::Shortest] {
            assert_eq!(sample_values(&c, &strat(kind, 10, 1)).unwrap(), vec!["x", "y"]);
        }
        assert!(matches!(
            sample_values(&column(&[]), &strat(SamplingKind::Random, 1, 1)),
            Err(Error::EmptyColumn(_))
        ));
    }

    fn labeled(spec: &[(&str, usize)]) -> Vec<LabeledColumn> {
        let mut out = Vec::new();
        for (label, n) in spec {
            for i in 0..*n {
                out.push(LabeledColumn {
                    column: Column::new(vec![format!("{label}{i}")], ColumnSource::new(format!("{label}{i}"), 0)),
                    label: label.to_string(),
                });
            }
        }
        out
    }

    #[test]
    fn proportional_allocation() {
        let train = labeled(&[("A", 50), ("B", 30), ("C", 20)]);
        let got = label_distribution(&stratified_select(&train, 0.1, 5).unwrap());
        assert_eq!(got, BTreeMap::from([("A".into(), 5), ("B".into(), 3), ("C".into(), 2)]));
    }

    #[test]
    fn full_fraction_is_identity() {
        let train = labeled(&[("A", 7), ("B", 3)]);
        assert_eq!(stratified_select(&train, 1.0, 9).unwrap(), train);
    }

    #[test]
    fn out_of_range_fraction() {
        let train = labeled(&[("A", 2)]);
        for f in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(stratified_select(&train, f, 0), Err(Error::FractionOutOfRange(_))));
        }
    }

    /// Enumerates every allocation with the right total and deviation < 1,
    /// then picks the one maximising the seats given to large remainders
    /// under the documented tie order.
    fn brute_force_allocation(counts: &[(&str, usize)], fraction: f64) -> BTreeMap<String, usize> {
        let n: usize = counts.iter().map(|c| c.1).sum();
        let total = (n as f64 * fraction).round() as usize;
        let mut best: Option<(Vec<(i64, i64, String)>, Vec<usize>)> = None;
        let ranges: Vec<Vec<usize>> = counts.iter().map(|&(_, c)| (0..=c).collect()).collect();
        let mut idx = vec![0usize; counts.len()];
        loop {
            let alloc: Vec<usize> = idx.iter().zip(&ranges).map(|(&i, r)| r[i]).collect();
            let ok = alloc.iter().sum::<usize>() == total
                && alloc
                    .iter()
                    .zip(counts)
                    .all(|(&a, &(_, c))| (a as f64 - c as f64 * fraction).abs() < 1.0);
            if ok {
                // Score: the multiset of (rounded-up? remainder, count, label) for
                // labels that received the ceiling, sorted best-first.
                let mut key: Vec<(i64, i64, String)> = alloc
                    .iter()
                    .zip(counts)
                    .filter(|(&a, &(_, c))| a as f64 > c as f64 * fraction + 1e-9)
                    .map(|(_, &(l, c))| {
                        let q = c as f64 * fraction;
                        (-((q - q.floor()) * 1e6).round() as i64, -(c as i64), l.to_string())
                    })
                    .collect();
                key.sort();
                if best.as_ref().is_none_or(|(b, _)| key < *b) {
                    best = Some((key, alloc));
                }
            }
            let mut d = 0;
            loop {
                if d == idx.len() {
                    let (_, alloc) = best.unwrap();
                    return counts.iter().map(|c| c.0.to_string()).zip(alloc).collect();
                }
                idx[d] += 1;
                if idx[d] < ranges[d].len() {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
        }
    }

    #[test]
    fn tie_goes_to_more_frequent_label() {
        let counts = [("A", 3), ("B", 1)];
        let oracle = brute_force_allocation(&counts, 0.5);
        assert_eq!(oracle, BTreeMap::from([("A".into(), 2), ("B".into(), 0)]));
        let got = label_distribution(&stratified_select(&labeled(&counts), 0.5, 1).unwrap());
        assert_eq!(got.get("A"), Some(&2));
        assert_eq!(got.get("B"), None);
    }

    #[test]
    fn allocation_matches_brute_force() {
        let cases: &[(&[(&str, usize)], f64)] = &[
            (&[("A", 5), ("B", 5), ("C", 5)], 0.5),
            (&[("A", 4), ("B", 3), ("C", 2)], 1.0 / 3.0),
            (&[("X", 7), ("Y", 2), ("Z", 2)], 0.25),
            (&[("A", 1), ("B", 1), ("C", 1)], 0.34),
            (&[("B", 6), ("A", 6)], 0.25),
        ];
        for (counts, f) in cases {
            let map: BTreeMap<String, usize> = counts.iter().map(|&(l, c)| (l.to_string(), c)).collect();
            assert_eq!(stratified_allocation(&map, *f).unwrap(), brute_force_allocation(counts, *f), "{counts:?} {f}");
        }
    }

    proptest! {
        #[test]
        fn sampled_values_are_ordered_submultisets(
            values in prop::collection::vec("[a-z]{0,6}", 1..20),
            k in 1usize..25,
            seed in any::<u64>(),
            kind in prop::sample::select(vec![SamplingKind::Archetype, SamplingKind::Random, SamplingKind::Shortest]),
        ) {
            let c = Column::new(values.clone(), ColumnSource::new("t", 0));
            let out = sample_values(&c, &strat(kind, k, seed)).unwrap();
            prop_assert_eq!(out.len(), k.min(values.len()));
            // order-preserving subsequence
            let mut it = values.iter();
            for v in &out {
                prop_assert!(it.any(|x| x == v));
            }
            prop_assert_eq!(&out, &sample_values(&c, &strat(kind, k, seed)).unwrap());
            if kind != SamplingKind::Random {
                prop_assert_eq!(&out, &sample_values(&c, &strat(kind, k, seed.wrapping_add(1))).unwrap());
            }
        }

        #[test]
        fn stratified_counts_within_one(
            counts in prop::collection::vec(1usize..40, 1..6),
            fraction in 0.01f64..=1.0,
            seed in any::<u64>(),
        ) {
            let names = ["A", "B", "C", "D", "E", "F"];
            let spec: Vec<(&str, usize)> = counts.iter().enumerate().map(|(i, &c)| (names[i], c)).collect();
            let train = labeled(&spec);
            let out = stratified_select(&train, fraction, seed).unwrap();
            let got = label_distribution(&out);
            let alloc = stratified_allocation(&label_distribution(&train), fraction).unwrap();
            prop_assert_eq!(out.len(), alloc.values().sum::<usize>());
            for &(label, n) in &spec {
                let g = *got.get(label).unwrap_or(&0) as f64;
                prop_assert!((g - n as f64 * fraction).abs() < 1.0);
                if n as f64 >= 1.0 / fraction {
                    prop_assert!(g >= 1.0);
                }
            }
        }
    }
}
