//! Recall@K and chained exact-match over oracle-labelled samples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::Relation;

/// Fraction of samples whose target is within the first `k` predictions.
pub fn recall_at_k(predictions: &[Vec<u32>], targets: &[u32], k: usize) -> f64 {
    assert_eq!(predictions.len(), targets.len(), "one prediction list per target");
    if targets.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| p.iter().take(k).any(|id| id == *t))
        .count();
    hits as f64 / targets.len() as f64
}

/// (prefix id, postfix id) pair; the EMPTY postfix is an ordinary id.
pub type ChainIds = (u32, u32);

/// Credit only when both the prefix and the postfix match.
pub fn chain_exact_match(predicted: &[ChainIds], targets: &[ChainIds]) -> f64 {
    assert_eq!(predicted.len(), targets.len());
    if targets.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(targets).filter(|(p, t)| p == t).count() as f64 / targets.len() as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationScore {
    pub n: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub track: String,
    pub per_relation: BTreeMap<Relation, RelationScore>,
    /// Over the samples that carry a postfix target.
    pub chain_exact_match: Option<f64>,
}

impl EvalResult {
    pub fn total(&self) -> usize {
        self.per_relation.values().map(|r| r.n).sum()
    }

    pub fn recall_at_1(&self, rel: Relation) -> f64 {
        self.per_relation.get(&rel).map_or(0.0, |r| r.recall_at_1)
    }

    /// Sample-weighted Recall@1 over several relations.
    pub fn pooled_recall_at_1(&self, rels: &[Relation]) -> f64 {
        let (hits, n) = rels.iter().filter_map(|r| self.per_relation.get(r)).fold((0.0, 0usize), |(h, n), s| {
            (h + s.recall_at_1 * s.n as f64, n + s.n)
        });
        if n == 0 {
            0.0
        } else {
            hits / n as f64
        }
    }
}

/// Accumulates ranked predictions per relation.
#[derive(Debug, Default)]
pub struct EvalBuilder {
    ranked: BTreeMap<Relation, (Vec<Vec<u32>>, Vec<u32>)>,
    chains: (Vec<ChainIds>, Vec<ChainIds>),
}

impl EvalBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, rel: Relation, ranked: Vec<u32>, target: u32) {
        let e = self.ranked.entry(rel).or_default();
        e.0.push(ranked);
        e.1.push(target);
    }

    pub fn add_chain(&mut self, predicted: ChainIds, target: ChainIds) {
        self.chains.0.push(predicted);
        self.chains.1.push(target);
    }

    pub fn finish(self, track: impl Into<String>) -> EvalResult {
        let per_relation = self
            .ranked
            .into_iter()
            .map(|(rel, (preds, targets))| {
                (
                    rel,
                    RelationScore {
                        n: targets.len(),
                        recall_at_1: recall_at_k(&preds, &targets, 1),
                        recall_at_5: recall_at_k(&preds, &targets, 5),
                    },
                )
            })
            .collect();
        let chain_exact_match =
            (!self.chains.1.is_empty()).then(|| chain_exact_match(&self.chains.0, &self.chains.1));
        EvalResult { track: track.into(), per_relation, chain_exact_match }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn recall_examples() {
        let preds = vec![vec![1, 2], vec![3, 4]];
        assert_eq!(recall_at_k(&preds, &[1, 3], 1), 1.0);
        assert_eq!(recall_at_k(&preds, &[9, 9], 5), 0.0);

        let preds: Vec<Vec<u32>> = (0..10).map(|i| if i < 3 { vec![0, 0, 0, 0, i] } else { vec![99; 5] }).collect();
        let targets: Vec<u32> = (0..10).collect();
        assert!((recall_at_k(&preds, &targets, 5) - 0.3).abs() < 1e-12);
        assert_eq!(recall_at_k(&preds, &targets, 4), 0.1);
    }

    #[test]
    fn chain_needs_both_parts() {
        assert_eq!(chain_exact_match(&[(1, 7)], &[(1, 0)]), 0.0);
        assert_eq!(chain_exact_match(&[(1, 0), (2, 3)], &[(1, 0), (2, 3)]), 1.0);
    }

    #[test]
    fn chain_equals_prefix_recall_without_postfixes() {
        let preds = [(1, 0), (2, 0), (5, 0)];
        let targets = [(1, 0), (3, 0), (5, 0)];
        let ranked: Vec<Vec<u32>> = preds.iter().map(|p| vec![p.0]).collect();
        let t: Vec<u32> = targets.iter().map(|t| t.0).collect();
        assert_eq!(chain_exact_match(&preds, &targets), recall_at_k(&ranked, &t, 1));
    }

    #[test]
    fn builder_counts_sum_to_samples() {
        let mut b = EvalBuilder::new();
        b.add(Relation::Current, vec![1], 1);
        b.add(Relation::Next, vec![2, 1], 1);
        b.add(Relation::Next, vec![3], 1);
        let r = b.finish("naive");
        assert_eq!(r.total(), 3);
        assert_eq!(r.per_relation[&Relation::Next].recall_at_5, 0.5);
        assert!((r.pooled_recall_at_1(&[Relation::Current, Relation::Next]) - 1.0 / 3.0).abs() < 1e-12);
        assert!(r.chain_exact_match.is_none());
    }

    proptest! {
        #[test]
        fn recall_is_monotone_and_order_free(
            data in proptest::collection::vec((proptest::collection::vec(0u32..8, 0..8), 0u32..8), 1..30),
            shift in 0usize..30,
        ) {
            let (preds, targets): (Vec<_>, Vec<_>) = data.iter().cloned().unzip();
            let mut prev = 0.0;
            for k in 1..10 {
                let r = recall_at_k(&preds, &targets, k);
                prop_assert!(r >= prev && (0.0..=1.0).contains(&r));
                prev = r;
            }
            let mut rotated = data.clone();
            rotated.rotate_left(shift % data.len());
            let (p2, t2): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
            prop_assert_eq!(recall_at_k(&preds, &targets, 3), recall_at_k(&p2, &t2, 3));
        }
    }
}
