//! Confidence-aware structuralization of conceptualized instances.
//!
//! Each generated slot of an instance is scored by three factors:
//!
//! - salience, a TF-IDF style weight
//!   `(1 + ln(freq)^2) * ln(|O| / Σ_k freq_k)` where `freq` counts the
//!   instance's candidates containing the slot and the sum runs over every
//!   instance of the collection `O`;
//! - reliability, the slot's PageRank in the instance's co-occurrence graph;
//! - consistency, the best similarity between the type of a candidate
//!   containing the slot and the source text.
//!
//! The confidence is `(λ1 * salience + λ2 * reliability) * consistency`.
//! Slots under the configured threshold are dropped, and the instance keeps
//! the single candidate type most similar to its text.

use std::collections::{BTreeMap, HashMap};

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conceptualize::ConceptualizedInstance;
use crate::error::{Error, Result};
use crate::similarity::SimilarityEnsemble;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TfForm {
    /// `1 + (log freq)^2`
    #[default]
    SquaredLog,
    /// `1 + log(freq^2)`
    LogOfSquare,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub max_iterations: usize,
    pub epsilon: f64,
    pub threshold: f64,
    pub tf_form: TfForm,
    pub log_base: f64,
    /// Weight co-occurrence edges by the number of shared candidates.
    pub weighted_cooccurrence: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            beta: 0.8,
            max_iterations: 300,
            epsilon: 1e-6,
            threshold: 1.0 / 3.0,
            tf_form: TfForm::SquaredLog,
            log_base: std::f64::consts::E,
            weighted_cooccurrence: false,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scoring.{m}")));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1/lambda2 must be non-negative");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if !self.threshold.is_finite() {
            return bad("threshold must be finite");
        }
        if self.log_base.is_nan() || self.log_base <= 1.0 {
            return bad("log_base must exceed 1");
        }
        Ok(())
    }

    fn log(&self, x: f64) -> f64 {
        x.ln() / self.log_base.ln()
    }
}

/// Union of an instance's slots with per-candidate membership.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlotSet {
    /// slot -> number of candidates containing it, in first-seen order
    pub freq: IndexMap<String, usize>,
    /// slot lists of each candidate
    pub members: Vec<Vec<String>>,
}

impl SlotSet {
    pub fn len(&self) -> usize {
        self.freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq.is_empty()
    }
}

pub fn collect_slot_set(instance: &ConceptualizedInstance) -> SlotSet {
    let mut set = SlotSet::default();
    for cand in &instance.candidates {
        for slot in &cand.slots {
            *set.freq.entry(slot.clone()).or_insert(0) += 1;
        }
        set.members.push(cand.slots.clone());
    }
    set
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalFrequencies {
    pub totals: HashMap<String, usize>,
    pub instance_count: usize,
}

pub fn global_slot_frequencies(instances: &[ConceptualizedInstance]) -> GlobalFrequencies {
    let mut totals = HashMap::new();
    for inst in instances {
        for (slot, f) in collect_slot_set(inst).freq {
            *totals.entry(slot).or_insert(0) += f;
        }
    }
    GlobalFrequencies {
        totals,
        instance_count: instances.len(),
    }
}

/// Natural-log salience with the default term-frequency form.
pub fn salience(instance_freq: usize, total_freq: usize, corpus_size: usize) -> f64 {
    salience_with(
        &ScoringConfig::default(),
        instance_freq,
        total_freq,
        corpus_size,
    )
}

pub fn salience_with(
    cfg: &ScoringConfig,
    instance_freq: usize,
    total_freq: usize,
    corpus_size: usize,
) -> f64 {
    let f = instance_freq as f64;
    let tf = match cfg.tf_form {
        TfForm::SquaredLog => 1.0 + cfg.log(f).powi(2),
        TfForm::LogOfSquare => 1.0 + cfg.log(f * f),
    };
    tf * cfg.log(corpus_size as f64 / total_freq as f64)
}

/// Result of the PageRank iteration over one slot set.
#[derive(Debug, Clone, PartialEq)]
pub struct Reliability {
    pub scores: IndexMap<String, f64>,
    pub iterations: usize,
    pub converged: bool,
    /// max per-slot change after each iteration; drives the stopping rule
    pub deltas: Vec<f64>,
    /// summed absolute change after each iteration, which contracts by `beta`
    pub l1_deltas: Vec<f64>,
}

/// Undirected co-occurrence adjacency, indexed like `slots.freq`.
fn cooccurrence(slots: &SlotSet, weighted: bool) -> Vec<Vec<(usize, f64)>> {
    let n = slots.len();
    let mut pairs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for cand in &slots.members {
        let idx: Vec<usize> = cand
            .iter()
            .filter_map(|s| slots.freq.get_index_of(s))
            .collect();
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                let key = (i.min(j), i.max(j));
                let w = pairs.entry(key).or_insert(0.0);
                *w = if weighted { *w + 1.0 } else { 1.0 };
            }
        }
    }
    let mut adj = vec![Vec::new(); n];
    for ((i, j), w) in pairs {
        adj[i].push((j, w));
        adj[j].push((i, w));
    }
    adj
}

pub fn reliability(slots: &SlotSet, cfg: &ScoringConfig) -> Reliability {
    let n = slots.len();
    if n == 0 {
        return Reliability {
            scores: IndexMap::new(),
            iterations: 0,
            converged: true,
            deltas: Vec::new(),
            l1_deltas: Vec::new(),
        };
    }
    let adj = cooccurrence(slots, cfg.weighted_cooccurrence);
    let degree: Vec<f64> = adj
        .iter()
        .map(|ns| ns.iter().map(|(_, w)| w).sum())
        .collect();
    let teleport = (1.0 - cfg.beta) / n as f64;

    let mut rank = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut deltas = Vec::new();
    let mut l1_deltas = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        for (s, ns) in adj.iter().enumerate() {
            let inflow: f64 = ns.iter().map(|&(k, w)| rank[k] * w / degree[k]).sum();
            next[s] = cfg.beta * inflow + teleport;
        }
        let (delta, l1) = rank
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold((0.0, 0.0), |(m, t), d| (f64::max(m, d), t + d));
        std::mem::swap(&mut rank, &mut next);
        deltas.push(delta);
        l1_deltas.push(l1);
        if delta < cfg.epsilon {
            converged = true;
            break;
        }
    }
    Reliability {
        scores: slots.freq.keys().cloned().zip(rank).collect(),
        iterations: deltas.len(),
        converged,
        deltas,
        l1_deltas,
    }
}

/// Best `sim(type(c), text)` over the candidates `c` containing `slot`.
pub fn consistency(
    slot: &str,
    instance: &ConceptualizedInstance,
    ensemble: &SimilarityEnsemble,
) -> Result<f64> {
    instance
        .candidates
        .iter()
        .filter(|c| c.slots.iter().any(|s| s == slot))
        .map(|c| ensemble.sim(&c.event_type, &instance.expression.text))
        .reduce(f64::max)
        .ok_or_else(|| {
            Error::Precondition(format!(
                "slot {slot:?} does not occur in instance {}",
                instance.expression.id
            ))
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    #[serde(rename = "name")]
    pub slot: String,
    pub freq: usize,
    pub salience: f64,
    pub reliability: f64,
    pub consistency: f64,
    pub score: f64,
}

pub fn score(r: &SlotRecord, cfg: &ScoringConfig) -> f64 {
    (cfg.lambda1 * r.salience + cfg.lambda2 * r.reliability) * r.consistency
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredInstance {
    pub id: String,
    pub text: String,
    #[serde(rename = "type")]
    pub event_type: String,
    pub type_consistency: f64,
    pub slots: Vec<SlotRecord>,
}

impl StructuredInstance {
    pub fn slot_names(&self) -> Vec<&str> {
        self.slots.iter().map(|s| s.slot.as_str()).collect()
    }
}

/// Argmax of `sim(type, text)` over distinct candidate types.
///
/// Ties go to the type produced by more candidates, then to the
/// lexicographically smaller name.
pub fn select_event_type(
    instance: &ConceptualizedInstance,
    ensemble: &SimilarityEnsemble,
) -> Option<(String, f64)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &instance.candidates {
        *counts.entry(c.event_type.as_str()).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .map(|(t, n)| (t, n, ensemble.sim(t, &instance.expression.text)))
        .max_by(|a, b| {
            a.2.total_cmp(&b.2)
                .then(a.1.cmp(&b.1))
                .then_with(|| b.0.cmp(a.0))
        })
        .map(|(t, _, s)| (t.to_owned(), s))
}

/// Scores every slot of one instance without thresholding.
pub fn score_instance(
    instance: &ConceptualizedInstance,
    global: &GlobalFrequencies,
    cfg: &ScoringConfig,
    ensemble: &SimilarityEnsemble,
) -> Vec<SlotRecord> {
    let slots = collect_slot_set(instance);
    let rel = reliability(&slots, cfg);
    // sim(type, text) per distinct candidate type
    let mut type_sims: HashMap<&str, f64> = HashMap::new();
    for c in &instance.candidates {
        type_sims
            .entry(&c.event_type)
            .or_insert_with(|| ensemble.sim(&c.event_type, &instance.expression.text));
    }
    slots
        .freq
        .iter()
        .map(|(slot, &freq)| {
            let total = global.totals.get(slot).copied().unwrap_or(freq).max(freq);
            let consistency = instance
                .candidates
                .iter()
                .filter(|c| c.slots.contains(slot))
                .map(|c| type_sims[c.event_type.as_str()])
                .fold(0.0, f64::max);
            let mut rec = SlotRecord {
                slot: slot.clone(),
                freq,
                salience: salience_with(cfg, freq, total, global.instance_count.max(1)),
                reliability: rel.scores[slot],
                consistency,
                score: 0.0,
            };
            rec.score = score(&rec, cfg);
            rec
        })
        .collect()
}

pub fn structuralize(
    instances: &[ConceptualizedInstance],
    cfg: &ScoringConfig,
    ensemble: &SimilarityEnsemble,
) -> Vec<StructuredInstance> {
    let global = global_slot_frequencies(instances);
    instances
        .par_iter()
        .filter_map(|inst| {
            let Some((event_type, type_consistency)) = select_event_type(inst, ensemble) else {
                log::warn!("instance {} has no candidates, skipped", inst.expression.id);
                return None;
            };
            let slots = score_instance(inst, &global, cfg, ensemble)
                .into_iter()
                .filter(|r| r.score >= cfg.threshold)
                .collect();
            Some(StructuredInstance {
                id: inst.expression.id.clone(),
                text: inst.expression.text.clone(),
                event_type,
                type_consistency,
                slots,
            })
        })
        .collect()
}
