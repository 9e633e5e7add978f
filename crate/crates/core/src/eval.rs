//! External clustering metrics: ARI, NMI and BCubed.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element index -> cluster id, ids contiguous from 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPartition {
    labels: Vec<usize>,
}

impl LabeledPartition {
    pub fn new<T: Hash + Eq>(labels: impl IntoIterator<Item = T>) -> Result<Self> {
        let mut ids: HashMap<T, usize> = HashMap::new();
        let labels: Vec<usize> = labels
            .into_iter()
            .map(|l| {
                let next = ids.len();
                *ids.entry(l).or_insert(next)
            })
            .collect();
        if labels.is_empty() {
            return Err(Error::Input(
                "a partition needs at least one element".into(),
            ));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cluster_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.cluster_count()];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    /// Same grouping of elements, regardless of label names.
    pub fn same_partition(&self, other: &Self) -> bool {
        // labels are renumbered by first appearance, so equal groupings are equal vectors
        self.labels == other.labels
    }
}

struct Contingency {
    n: usize,
    cells: HashMap<(usize, usize), usize>,
    gold: Vec<usize>,
    pred: Vec<usize>,
}

fn contingency(gold: &LabeledPartition, pred: &LabeledPartition) -> Result<Contingency> {
    if gold.len() != pred.len() {
        return Err(Error::Input(format!(
            "partition lengths differ: gold {} vs predicted {}",
            gold.len(),
            pred.len()
        )));
    }
    let mut cells = HashMap::new();
    for (&g, &p) in gold.labels.iter().zip(&pred.labels) {
        *cells.entry((g, p)).or_insert(0) += 1;
    }
    Ok(Contingency {
        n: gold.len(),
        cells,
        gold: gold.sizes(),
        pred: pred.sizes(),
    })
}

fn pairs(k: usize) -> f64 {
    (k * k.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index, contingency-table form.
///
/// When the expected and maximal index coincide (for example both sides a
/// single cluster) the result is 1 for identical partitions and 0 otherwise.
pub fn ari(gold: &LabeledPartition, pred: &LabeledPartition) -> Result<f64> {
    let t = contingency(gold, pred)?;
    let index: f64 = t.cells.values().map(|&c| pairs(c)).sum();
    let sum_gold: f64 = t.gold.iter().map(|&c| pairs(c)).sum();
    let sum_pred: f64 = t.pred.iter().map(|&c| pairs(c)).sum();
    let total = pairs(t.n);
    let expected = if total > 0.0 {
        sum_gold * sum_pred / total
    } else {
        0.0
    };
    let max = (sum_gold + sum_pred) / 2.0;
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(if gold.same_partition(pred) { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

fn entropy(sizes: &[usize], n: f64) -> f64 {
    sizes
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2 * MI / (H(gold) + H(pred))` in natural log; 1 when both entropies vanish.
pub fn nmi(gold: &LabeledPartition, pred: &LabeledPartition) -> Result<f64> {
    let t = contingency(gold, pred)?;
    let n = t.n as f64;
    let hg = entropy(&t.gold, n);
    let hp = entropy(&t.pred, n);
    if hg + hp == 0.0 {
        return Ok(1.0);
    }
    let mut cells: Vec<(&(usize, usize), &usize)> = t.cells.iter().collect();
    cells.sort();
    let mi: f64 = cells
        .into_iter()
        .map(|(&(g, p), &c)| {
            let pij = c as f64 / n;
            pij * (pij * n * n / (t.gold[g] as f64 * t.pred[p] as f64)).ln()
        })
        .sum();
    Ok((2.0 * mi / (hg + hp)).clamp(0.0, 1.0))
}

/// BCubed precision, recall and their harmonic mean.
pub fn bcubed(gold: &LabeledPartition, pred: &LabeledPartition) -> Result<(f64, f64, f64)> {
    let t = contingency(gold, pred)?;
    let n = t.n as f64;
    let mut cells: Vec<(&(usize, usize), &usize)> = t.cells.iter().collect();
    cells.sort();
    let (mut p, mut r) = (0.0, 0.0);
    for (&(g, q), &c) in cells {
        // each of the c elements in this cell shares it with c elements
        let c = c as f64;
        p += c * c / t.pred[q] as f64;
        r += c * c / t.gold[g] as f64;
    }
    let (p, r) = (p / n, r / n);
    let f1 = if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    };
    Ok((p, r, f1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringMetrics {
    pub ari: f64,
    pub nmi: f64,
    pub bcubed_p: f64,
    pub bcubed_r: f64,
    pub bcubed_f1: f64,
}

impl ClusteringMetrics {
    pub fn compute(gold: &LabeledPartition, pred: &LabeledPartition) -> Result<Self> {
        let (bcubed_p, bcubed_r, bcubed_f1) = bcubed(gold, pred)?;
        Ok(Self {
            ari: ari(gold, pred)?,
            nmi: nmi(gold, pred)?,
            bcubed_p,
            bcubed_r,
            bcubed_f1,
        })
    }

    /// Field-wise mean over repeated runs.
    pub fn mean(runs: &[ClusteringMetrics]) -> Option<Self> {
        if runs.is_empty() {
            return None;
        }
        let k = runs.len() as f64;
        let avg = |f: fn(&ClusteringMetrics) -> f64| runs.iter().map(f).sum::<f64>() / k;
        Some(Self {
            ari: avg(|m| m.ari),
            nmi: avg(|m| m.nmi),
            bcubed_p: avg(|m| m.bcubed_p),
            bcubed_r: avg(|m| m.bcubed_r),
            bcubed_f1: avg(|m| m.bcubed_f1),
        })
    }
}

impl fmt::Display for ClusteringMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("ARI", self.ari),
            ("NMI", self.nmi),
            ("BCubed-P", self.bcubed_p),
            ("BCubed-R", self.bcubed_r),
            ("BCubed-F1", self.bcubed_f1),
        ];
        writeln!(f, "{:<10} {:>8}", "metric", "value")?;
        for (name, v) in rows {
            writeln!(f, "{name:<10} {v:>8.4}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldMention {
    pub id: String,
    #[serde(rename = "type")]
    pub event_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessReport {
    pub metrics: ClusteringMetrics,
    pub retained: usize,
    pub retained_types: Vec<String>,
    /// retained mentions with no predicted cluster; each is scored as its own singleton
    pub unaligned: usize,
    pub runs: usize,
}

/// The `k` gold types with the most mentions, ties broken by name.
pub fn top_types(gold: &[GoldMention], k: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for m in gold {
        *counts.entry(&m.event_type).or_insert(0) += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked
        .into_iter()
        .take(k)
        .map(|(t, _)| t.to_owned())
        .collect()
}

/// Scores predicted clusters against the mentions of the `k` most frequent
/// gold types. Each element of `runs` maps expression id -> cluster id for
/// one clustering run; metrics are averaged over runs.
pub fn mention_harness(
    gold: &[GoldMention],
    runs: &[HashMap<String, usize>],
    k: usize,
) -> Result<HarnessReport> {
    if runs.is_empty() {
        return Err(Error::Input("no clustering run to evaluate".into()));
    }
    let types = top_types(gold, k);
    let retained: Vec<&GoldMention> = gold
        .iter()
        .filter(|m| types.contains(&m.event_type))
        .collect();
    if retained.is_empty() {
        return Err(Error::Input(
            "no gold mention retained for evaluation".into(),
        ));
    }
    let gold_part = LabeledPartition::new(retained.iter().map(|m| m.event_type.as_str()))?;

    let mut per_run = Vec::with_capacity(runs.len());
    let mut unaligned = 0;
    for assignment in runs {
        unaligned = 0;
        let labels: Vec<(bool, usize)> = retained
            .iter()
            .enumerate()
            .map(|(i, m)| match assignment.get(&m.id) {
                Some(&c) => (true, c),
                None => {
                    unaligned += 1;
                    (false, i)
                }
            })
            .collect();
        let pred = LabeledPartition::new(labels)?;
        per_run.push(ClusteringMetrics::compute(&gold_part, &pred)?);
    }
    if unaligned > 0 {
        log::warn!("{unaligned} gold mention(s) have no predicted cluster");
    }
    Ok(HarnessReport {
        metrics: ClusteringMetrics::mean(&per_run).expect("at least one run"),
        retained: retained.len(),
        retained_types: types,
        unaligned,
        runs: runs.len(),
    })
}
