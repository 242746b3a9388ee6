//! Batch planners.
//!
//! Plans are pure functions of their inputs plus `(seed, epoch)`. The
//! length-aware planner packs ids greedily by element count and then only
//! permutes the order of the batches, so batch membership (and with it the
//! padding overhead) is stable across epochs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::stats::ShapeRecord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batches: Vec<Vec<String>>,
    pub seed: u64,
    pub epoch: u64,
}

impl BatchPlan {
    pub fn num_items(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn hash_words(words: &[u64]) -> u64 {
    words.iter().fold(0x9e37_79b9_7f4a_7c15, |acc, &w| {
        mix(acc ^ mix(w.wrapping_add(0x9e37_79b9_7f4a_7c15)))
    })
}

/// PCG-64 stream for one `(seed, epoch)` pair.
pub fn epoch_rng(seed: u64, epoch: u64) -> Pcg64 {
    Pcg64::seed_from_u64(hash_words(&[seed, epoch]))
}

/// Greedy descending-numel packing bounded by `batch_bins` elements per
/// batch. Items larger than the bound get a batch of their own.
pub fn build_numel_sampler(shapes: &[ShapeRecord], batch_bins: usize, seed: u64, epoch: u64) -> BatchPlan {
    let bins = batch_bins.max(1);
    let mut order: Vec<(usize, &str)> = shapes.iter().map(|s| (s.numel(), s.id.as_str())).collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));

    let mut batches = pack_greedy(&order, bins);
    batches.shuffle(&mut epoch_rng(seed, epoch));
    BatchPlan { batches, seed, epoch }
}

fn pack_greedy(order: &[(usize, &str)], bins: usize) -> Vec<Vec<String>> {
    let mut batches = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut load = 0usize;
    for &(numel, id) in order {
        if !current.is_empty() && load + numel > bins {
            batches.push(std::mem::take(&mut current));
            load = 0;
        }
        current.push(id.to_string());
        load += numel;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Consecutive chunks of `batch_size`, optionally after a seeded shuffle
/// of the ids.
pub fn build_fixed_sampler(ids: &[String], batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> BatchPlan {
    let size = batch_size.max(1);
    let mut ids = ids.to_vec();
    if shuffle {
        ids.shuffle(&mut epoch_rng(seed, epoch));
    }
    let batches = ids.chunks(size).map(<[String]>::to_vec).collect();
    BatchPlan { batches, seed, epoch }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn rec(id: &str, dims: &[usize]) -> ShapeRecord {
        let mut m = BTreeMap::new();
        m.insert("speech".to_string(), dims.to_vec());
        ShapeRecord { id: id.into(), dims: m }
    }

    fn sorted_batches(p: &BatchPlan) -> Vec<Vec<String>> {
        let mut b = p.batches.clone();
        b.sort();
        b
    }

    #[test]
    fn numel_small_example() {
        let shapes = [rec("a", &[10, 2]), rec("b", &[5, 2]), rec("c", &[20, 2])];
        let plan = build_numel_sampler(&shapes, 30, 0, 0);
        assert_eq!(
            sorted_batches(&plan),
            vec![vec!["a".to_string(), "b".to_string()], vec!["c".to_string()]]
        );
    }

    #[test]
    fn bins_one_gives_singletons() {
        let shapes: Vec<_> = (0..7).map(|i| rec(&format!("u{i}"), &[i + 1])).collect();
        let plan = build_numel_sampler(&shapes, 1, 3, 1);
        assert_eq!(plan.batches.len(), 7);
        assert!(plan.batches.iter().all(|b| b.len() == 1));
    }

    #[test]
    fn deterministic_plans() {
        let shapes: Vec<_> = (0..40).map(|i| rec(&format!("u{i}"), &[i % 9 + 1, 3])).collect();
        assert_eq!(
            build_numel_sampler(&shapes, 50, 7, 2),
            build_numel_sampler(&shapes, 50, 7, 2)
        );
        let ids: Vec<String> = (0..11).map(|i| format!("x{i}")).collect();
        assert_eq!(
            build_fixed_sampler(&ids, 3, 1, 1, true),
            build_fixed_sampler(&ids, 3, 1, 1, true)
        );
    }

    #[test]
    fn fixed_sizes() {
        let ids: Vec<String> = (0..5).map(|i| i.to_string()).collect();
        let plan = build_fixed_sampler(&ids, 2, 0, 0, false);
        let sizes: Vec<_> = plan.batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert_eq!(plan.batches[0], vec!["0".to_string(), "1".to_string()]);
    }

    #[test]
    fn membership_is_stable_across_epochs() {
        let shapes: Vec<_> = (0..30).map(|i| rec(&format!("u{i:02}"), &[(i * 7) % 13 + 1])).collect();
        let e0 = build_numel_sampler(&shapes, 20, 5, 0);
        let e1 = build_numel_sampler(&shapes, 20, 5, 1);
        assert_eq!(sorted_batches(&e0), sorted_batches(&e1));
    }
}
