//! Synthetic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemind::structuralize::SlotSet;
use schemind::WeightedGraph;

/// `k` dense communities of `size` nodes with sparse noise between them.
pub fn planted_graph(k: usize, size: usize, seed: u64) -> WeightedGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = k * size;
    let mut g = WeightedGraph::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let same = i / size == j / size;
            let p = if same { 0.6 } else { 0.02 };
            if rng.random::<f64>() < p {
                g.set_weight(i, j, rng.random_range(0.5..1.5));
            }
        }
    }
    g
}

/// `candidates` candidate slot lists drawn from a vocabulary of `vocab` slots.
pub fn random_slot_set(vocab: usize, candidates: usize, seed: u64) -> SlotSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = SlotSet::default();
    for _ in 0..candidates {
        let len = rng.random_range(1..=vocab.min(6));
        let mut slots: Vec<String> = (0..len)
            .map(|_| format!("s{}", rng.random_range(0..vocab)))
            .collect();
        slots.sort();
        slots.dedup();
        for s in &slots {
            *set.freq.entry(s.clone()).or_insert(0) += 1;
        }
        set.members.push(slots);
    }
    set
}

pub fn random_labels(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..k)).collect()
}
