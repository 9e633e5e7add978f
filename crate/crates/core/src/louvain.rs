//! Weighted undirected graphs and Louvain community detection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Symmetric weighted graph without self loops; zero-weight pairs have no edge.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightedGraph {
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl WeightedGraph {
    pub fn new(node_count: usize) -> Self {
        Self {
            adjacency: vec![Vec::new(); node_count],
        }
    }

    /// Builds from the strict upper triangle of a dense matrix.
    pub fn from_dense(matrix: &[Vec<f64>]) -> Self {
        let mut g = Self::new(matrix.len());
        for (i, row) in matrix.iter().enumerate() {
            for (j, &w) in row.iter().enumerate().skip(i + 1) {
                g.set_weight(i, j, w);
            }
        }
        g
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Sets `w(i, j) = w(j, i)`; a non-positive weight removes the edge.
    pub fn set_weight(&mut self, i: usize, j: usize, w: f64) {
        assert!(i != j, "self loops are not allowed");
        assert!(w.is_finite(), "edge weight must be finite");
        for (a, b) in [(i, j), (j, i)] {
            let row = &mut self.adjacency[a];
            match row.binary_search_by_key(&b, |&(n, _)| n) {
                Ok(pos) if w > 0.0 => row[pos].1 = w,
                Ok(pos) => {
                    row.remove(pos);
                }
                Err(pos) if w > 0.0 => row.insert(pos, (b, w)),
                Err(_) => {}
            }
        }
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let row = &self.adjacency[i];
        row.binary_search_by_key(&j, |&(n, _)| n)
            .map(|pos| row[pos].1)
            .unwrap_or(0.0)
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(i, row)| {
            row.iter()
                .filter(move |(j, _)| *j > i)
                .map(move |&(j, w)| (i, j, w))
        })
    }

    pub fn is_symmetric(&self) -> bool {
        self.adjacency
            .iter()
            .enumerate()
            .all(|(i, row)| row.iter().all(|&(j, w)| self.weight(j, i) == w))
    }

    /// Relabels node `i` as `perm[i]`.
    fn permuted(&self, perm: &[usize]) -> Self {
        let mut adjacency = vec![Vec::new(); self.node_count()];
        for (i, row) in self.adjacency.iter().enumerate() {
            let mut r: Vec<(usize, f64)> = row.iter().map(|&(j, w)| (perm[j], w)).collect();
            r.sort_by_key(|&(j, _)| j);
            adjacency[perm[i]] = r;
        }
        Self { adjacency }
    }
}

/// Partition of nodes into clusters numbered `0..cluster_count` in order of
/// first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub assignment: Vec<usize>,
}

impl ClusterAssignment {
    /// Renumbers arbitrary labels contiguously by first appearance.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut map = BTreeMap::new();
        let assignment = labels
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Self { assignment }
    }

    pub fn cluster_count(&self) -> usize {
        self.assignment.iter().max().map_or(0, |m| m + 1)
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.cluster_count()];
        for (node, &c) in self.assignment.iter().enumerate() {
            out[c].push(node);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LouvainOutcome {
    pub clusters: ClusterAssignment,
    /// Modularity of the original graph after each completed level.
    pub modularity_per_pass: Vec<f64>,
}

/// Newman modularity of a partition of `graph`. An edgeless graph scores 0.
pub fn modularity(graph: &WeightedGraph, labels: &[usize]) -> f64 {
    let degree: Vec<f64> = (0..graph.node_count())
        .map(|i| graph.neighbors(i).iter().map(|(_, w)| w).sum())
        .collect();
    let two_m: f64 = degree.iter().sum();
    if two_m == 0.0 {
        return 0.0;
    }
    let mut internal: BTreeMap<usize, f64> = BTreeMap::new();
    let mut total: BTreeMap<usize, f64> = BTreeMap::new();
    for i in 0..graph.node_count() {
        *total.entry(labels[i]).or_insert(0.0) += degree[i];
        for &(j, w) in graph.neighbors(i) {
            if labels[i] == labels[j] {
                *internal.entry(labels[i]).or_insert(0.0) += w;
            }
        }
    }
    total
        .iter()
        .map(|(c, tot)| internal.get(c).copied().unwrap_or(0.0) / two_m - (tot / two_m).powi(2))
        .sum()
}

/// Louvain with the node visit order shuffled by `seed`.
pub fn louvain(graph: &WeightedGraph, seed: u64) -> LouvainOutcome {
    let mut order: Vec<usize> = (0..graph.node_count()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    louvain_in_order(graph, &order)
}

/// Louvain with the visit order derived from per-node identity keys, so that
/// permuting the input nodes permutes the result the same way.
pub fn louvain_keyed<K: AsRef<[u8]>>(
    graph: &WeightedGraph,
    keys: &[K],
    seed: u64,
) -> LouvainOutcome {
    assert_eq!(keys.len(), graph.node_count(), "one key per node");
    let mut ranked: Vec<([u8; 32], &[u8], usize)> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(k.as_ref());
            (h.finalize().into(), k.as_ref(), i)
        })
        .collect();
    ranked.sort();
    let order: Vec<usize> = ranked.into_iter().map(|(_, _, i)| i).collect();
    louvain_in_order(graph, &order)
}

/// `order[r]` is the node visited r-th.
fn louvain_in_order(graph: &WeightedGraph, order: &[usize]) -> LouvainOutcome {
    let n = graph.node_count();
    // Relabel so that visit order is index order; ties break on index.
    let mut perm = vec![0; n];
    for (rank, &node) in order.iter().enumerate() {
        perm[node] = rank;
    }
    let g = graph.permuted(&perm);

    let mut level = Level::from_graph(&g);
    // community of each relabeled original node
    let mut membership: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    loop {
        let (moved, communities) = level.local_moves();
        if !moved || communities.iter().max().map_or(0, |m| m + 1) == level.size() {
            break;
        }
        for m in membership.iter_mut() {
            *m = communities[*m];
        }
        history.push(modularity(&g, &membership));
        level = level.coarsen(&communities);
        if level.size() == 1 {
            break;
        }
    }

    let labels: Vec<usize> = (0..n).map(|i| membership[perm[i]]).collect();
    LouvainOutcome {
        clusters: ClusterAssignment::from_labels(&labels),
        modularity_per_pass: history,
    }
}

/// One level of the coarsening hierarchy.
struct Level {
    adjacency: Vec<Vec<(usize, f64)>>,
    /// weight of edges collapsed inside each node, each counted once
    self_loops: Vec<f64>,
    degree: Vec<f64>,
    two_m: f64,
}

const MIN_GAIN: f64 = 1e-12;
const MAX_SWEEPS: usize = 1_000;

impl Level {
    fn from_graph(g: &WeightedGraph) -> Self {
        let adjacency: Vec<Vec<(usize, f64)>> = (0..g.node_count())
            .map(|i| g.neighbors(i).to_vec())
            .collect();
        Self::new(adjacency, vec![0.0; g.node_count()])
    }

    fn new(adjacency: Vec<Vec<(usize, f64)>>, self_loops: Vec<f64>) -> Self {
        let degree: Vec<f64> = adjacency
            .iter()
            .zip(&self_loops)
            .map(|(row, s)| row.iter().map(|(_, w)| w).sum::<f64>() + 2.0 * s)
            .collect();
        let two_m = degree.iter().sum();
        Self {
            adjacency,
            self_loops,
            degree,
            two_m,
        }
    }

    fn size(&self) -> usize {
        self.adjacency.len()
    }

    /// Greedy local moves; returns whether any node changed community and
    /// the contiguous community index of every node.
    fn local_moves(&self) -> (bool, Vec<usize>) {
        let n = self.size();
        let mut community: Vec<usize> = (0..n).collect();
        if self.two_m == 0.0 {
            return (false, community);
        }
        let mut total: Vec<f64> = self.degree.clone();
        let mut link = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut moved_any = false;

        for _ in 0..MAX_SWEEPS {
            let mut moved = false;
            for node in 0..n {
                let own = community[node];
                let k = self.degree[node];
                for &(nb, w) in &self.adjacency[node] {
                    let c = community[nb];
                    if link[c] == 0.0 {
                        touched.push(c);
                    }
                    link[c] += w;
                }
                total[own] -= k;

                let gain = |c: usize, l: f64| l - total[c] * k / self.two_m;
                let mut best = own;
                let mut best_gain = gain(own, link[own]);
                touched.sort_unstable();
                for &c in &touched {
                    let g = gain(c, link[c]);
                    if g > best_gain + MIN_GAIN {
                        best = c;
                        best_gain = g;
                    }
                }
                total[best] += k;
                if best != own {
                    community[node] = best;
                    moved = true;
                }
                for &c in &touched {
                    link[c] = 0.0;
                }
                touched.clear();
            }
            if !moved {
                break;
            }
            moved_any = true;
        }
        (moved_any, renumber(&community))
    }

    fn coarsen(&self, communities: &[usize]) -> Level {
        let k = communities.iter().max().map_or(0, |m| m + 1);
        let mut self_loops = vec![0.0; k];
        let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, row) in self.adjacency.iter().enumerate() {
            let ci = communities[i];
            self_loops[ci] += self.self_loops[i];
            for &(j, w) in row {
                if j <= i {
                    continue;
                }
                let cj = communities[j];
                if ci == cj {
                    self_loops[ci] += w;
                } else {
                    *edges.entry((ci.min(cj), ci.max(cj))).or_insert(0.0) += w;
                }
            }
        }
        let mut adjacency = vec![Vec::new(); k];
        for ((a, b), w) in edges {
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        for row in &mut adjacency {
            row.sort_by_key(|&(j, _)| j);
        }
        Level::new(adjacency, self_loops)
    }
}

fn renumber(labels: &[usize]) -> Vec<usize> {
    ClusterAssignment::from_labels(labels).assignment
}
