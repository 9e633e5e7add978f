//! Graph-based aggregation of structured instances into cluster schemas.
//!
//! Instances are nodes of a complete similarity graph weighted by
//! `λ3 * sim(text) + λ4 * sim(type) + λ5 * sim(slot sets)`. After pruning,
//! Louvain partitions the graph and each community is merged into one
//! schema: the type name is the most frequent member type, and synonymous
//! slots are grouped by a second Louvain pass over a slot similarity graph.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::louvain::{louvain_keyed, ClusterAssignment, LouvainOutcome, WeightedGraph};
use crate::schema::render_schema;
use crate::similarity::SimilarityEnsemble;
use crate::structuralize::StructuredInstance;

pub type SchemaGraph = WeightedGraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgePrune {
    None,
    /// Drop edges lighter than the mean weight over all node pairs.
    BelowMean,
    /// Drop edges lighter than the given weight.
    Absolute(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub edge_prune: EdgePrune,
    /// Pruning for the slot synonym graph, whose weights are plain similarities.
    pub slot_edge_prune: EdgePrune,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            lambda3: 3.0,
            lambda4: 1.0,
            lambda5: 1.0,
            edge_prune: EdgePrune::BelowMean,
            slot_edge_prune: EdgePrune::Absolute(0.8),
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        let ls = [self.lambda3, self.lambda4, self.lambda5];
        if ls.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("graph lambdas must be non-negative".into()));
        }
        if ls.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("graph lambdas must not all be zero".into()));
        }
        for p in [self.edge_prune, self.slot_edge_prune] {
            if let EdgePrune::Absolute(t) = p {
                if !t.is_finite() {
                    return Err(Error::Config(
                        "absolute prune threshold must be finite".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Unpruned edge weight between two instances.
pub fn schema_weight(
    a: &StructuredInstance,
    b: &StructuredInstance,
    ensemble: &SimilarityEnsemble,
    cfg: &GraphConfig,
) -> f64 {
    cfg.lambda3 * ensemble.sim(&a.text, &b.text)
        + cfg.lambda4 * ensemble.sim(&a.event_type, &b.event_type)
        + cfg.lambda5 * ensemble.sim_slotsets(&a.slot_names(), &b.slot_names())
}

fn pruned_graph(n: usize, pairs: Vec<(usize, usize, f64)>, prune: EdgePrune) -> WeightedGraph {
    let cutoff = match prune {
        EdgePrune::None => f64::MIN_POSITIVE,
        EdgePrune::Absolute(t) => t,
        EdgePrune::BelowMean => {
            if pairs.is_empty() {
                0.0
            } else {
                // sorted summation keeps the mean independent of pair order
                let mut w: Vec<f64> = pairs.iter().map(|p| p.2).collect();
                w.sort_by(f64::total_cmp);
                w.iter().sum::<f64>() / w.len() as f64
            }
        }
    };
    let mut g = WeightedGraph::new(n);
    for (i, j, w) in pairs {
        if w > 0.0 && w >= cutoff {
            g.set_weight(i, j, w);
        }
    }
    g
}

pub fn build_schema_graph(
    instances: &[StructuredInstance],
    ensemble: &SimilarityEnsemble,
    cfg: &GraphConfig,
) -> SchemaGraph {
    let n = instances.len();
    let pairs: Vec<(usize, usize, f64)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            (i + 1..n).map(move |j| {
                (
                    i,
                    j,
                    schema_weight(&instances[i], &instances[j], ensemble, cfg),
                )
            })
        })
        .collect();
    pruned_graph(n, pairs, cfg.edge_prune)
}

/// Louvain over the schema graph, visiting nodes in an order keyed by instance id.
pub fn cluster_instances(
    instances: &[StructuredInstance],
    ensemble: &SimilarityEnsemble,
    cfg: &GraphConfig,
    seed: u64,
) -> (SchemaGraph, LouvainOutcome) {
    let graph = build_schema_graph(instances, ensemble, cfg);
    let keys: Vec<&str> = instances.iter().map(|i| i.id.as_str()).collect();
    let outcome = louvain_keyed(&graph, &keys, seed);
    (graph, outcome)
}

/// A representative slot name and the synonyms it stands for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotGroup {
    #[serde(rename = "name")]
    pub representative: String,
    pub synonyms: Vec<String>,
}

impl SlotGroup {
    pub fn members(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.representative.as_str())
            .chain(self.synonyms.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedSchema {
    #[serde(rename = "type")]
    pub type_name: String,
    pub type_candidates: BTreeMap<String, usize>,
    #[serde(rename = "slots")]
    pub slot_groups: Vec<SlotGroup>,
    #[serde(rename = "members")]
    pub member_ids: Vec<String>,
}

impl AggregatedSchema {
    pub fn slot_names(&self) -> Vec<&str> {
        self.slot_groups
            .iter()
            .map(|g| g.representative.as_str())
            .collect()
    }

    pub fn render(&self) -> String {
        render_schema(&self.type_name, &self.slot_names())
    }
}

/// Most frequent member type; ties go to the higher summed type consistency,
/// then to the lexicographically smaller name.
pub fn normalize_type_name(members: &[&StructuredInstance]) -> Option<String> {
    let mut stats: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for m in members {
        let e = stats.entry(m.event_type.as_str()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += m.type_consistency;
    }
    stats
        .into_iter()
        .max_by(|a, b| {
            a.1 .0
                .cmp(&b.1 .0)
                .then(a.1 .1.total_cmp(&b.1 .1))
                .then_with(|| b.0.cmp(a.0))
        })
        .map(|(t, _)| t.to_owned())
}

/// Groups synonymous slots with Louvain over pairwise slot similarity.
///
/// The representative of a group is the member with the highest summed slot
/// score, ties broken lexicographically. Groups come back sorted by
/// representative.
pub fn merge_slot_synonyms(
    slots: &[String],
    scores: &HashMap<String, f64>,
    ensemble: &SimilarityEnsemble,
    prune: EdgePrune,
    seed: u64,
) -> Vec<SlotGroup> {
    let slots: Vec<&String> = slots.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if slots.is_empty() {
        return Vec::new();
    }
    let n = slots.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j, ensemble.sim(slots[i], slots[j])));
        }
    }
    let graph = pruned_graph(n, pairs, prune);
    let outcome = louvain_keyed(&graph, &slots, seed);

    let score = |s: &str| scores.get(s).copied().unwrap_or(0.0);
    let mut groups: Vec<SlotGroup> = outcome
        .clusters
        .members()
        .into_iter()
        .map(|idx| {
            let mut members: Vec<&str> = idx.iter().map(|&i| slots[i].as_str()).collect();
            members.sort_by(|a, b| score(b).total_cmp(&score(a)).then_with(|| a.cmp(b)));
            let representative = members[0].to_owned();
            let mut synonyms: Vec<String> = members[1..].iter().map(|s| s.to_string()).collect();
            synonyms.sort();
            SlotGroup {
                representative,
                synonyms,
            }
        })
        .collect();
    groups.sort_by(|a, b| a.representative.cmp(&b.representative));
    groups
}

/// Merges each cluster of `instances` into one schema, largest cluster first.
pub fn aggregate(
    instances: &[StructuredInstance],
    assignment: &ClusterAssignment,
    ensemble: &SimilarityEnsemble,
    cfg: &GraphConfig,
    seed: u64,
) -> Result<Vec<AggregatedSchema>> {
    if assignment.len() != instances.len() {
        return Err(Error::Input(format!(
            "assignment covers {} nodes but there are {} instances",
            assignment.len(),
            instances.len()
        )));
    }
    let clusters = assignment.members();
    let mut schemas: Vec<(usize, usize, AggregatedSchema)> = clusters
        .par_iter()
        .filter(|m| !m.is_empty())
        .map(|idx| {
            let members: Vec<&StructuredInstance> = idx.iter().map(|&i| &instances[i]).collect();
            let mut type_candidates = BTreeMap::new();
            let mut slot_scores: HashMap<String, f64> = HashMap::new();
            for m in &members {
                *type_candidates.entry(m.event_type.clone()).or_insert(0) += 1;
                for s in &m.slots {
                    *slot_scores.entry(s.slot.clone()).or_insert(0.0) += s.score;
                }
            }
            let union: Vec<String> = slot_scores.keys().cloned().collect();
            let schema = AggregatedSchema {
                type_name: normalize_type_name(&members).expect("cluster is non-empty"),
                type_candidates,
                slot_groups: merge_slot_synonyms(
                    &union,
                    &slot_scores,
                    ensemble,
                    cfg.slot_edge_prune,
                    seed,
                ),
                member_ids: members.iter().map(|m| m.id.clone()).collect(),
            };
            (idx.len(), idx[0], schema)
        })
        .collect();
    schemas.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(schemas.into_iter().map(|(_, _, s)| s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::LexiconBackend;
    use crate::structuralize::SlotRecord;

    fn slot(name: &str, score: f64) -> SlotRecord {
        SlotRecord {
            slot: name.into(),
            freq: 1,
            salience: 0.0,
            reliability: 0.0,
            consistency: 1.0,
            score,
        }
    }

    fn si(id: &str, text: &str, t: &str, tc: f64, slots: &[(&str, f64)]) -> StructuredInstance {
        StructuredInstance {
            id: id.into(),
            text: text.into(),
            event_type: t.into(),
            type_consistency: tc,
            slots: slots.iter().map(|(n, s)| slot(n, *s)).collect(),
        }
    }

    #[test]
    fn identical_instances_weight() {
        let a = si(
            "1",
            "the army attacked",
            "attack",
            1.0,
            &[("attacker", 1.0)],
        );
        let b = si(
            "2",
            "the army attacked",
            "attack",
            1.0,
            &[("attacker", 1.0)],
        );
        let ens = SimilarityEnsemble::lexical();
        let cfg = GraphConfig::default();
        assert_eq!(schema_weight(&a, &b, &ens, &cfg), 5.0);
        let g = build_schema_graph(&[a.clone(), b], &ens, &cfg);
        assert_eq!(g.weight(0, 1), 5.0);
        assert!(g.is_symmetric());
        let single = build_schema_graph(&[a], &ens, &cfg);
        assert_eq!(single.edge_count(), 0);
    }

    #[test]
    fn below_mean_pruning() {
        let pairs = vec![(0, 1, 1.0), (0, 2, 2.0), (1, 2, 6.0)];
        let g = pruned_graph(3, pairs.clone(), EdgePrune::BelowMean);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.weight(1, 2), 6.0);
        assert_eq!(
            pruned_graph(3, pairs.clone(), EdgePrune::None).edge_count(),
            3
        );
        assert_eq!(
            pruned_graph(3, pairs, EdgePrune::Absolute(2.0)).edge_count(),
            2
        );
    }

    #[test]
    fn config_round_trip() {
        let cfg = GraphConfig {
            edge_prune: EdgePrune::Absolute(0.25),
            ..Default::default()
        };
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<GraphConfig>(&json).unwrap(), cfg);
        assert!(GraphConfig {
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn type_name_selection() {
        let die1 = si("1", "", "die", 0.5, &[]);
        let die2 = si("2", "", "die", 0.5, &[]);
        let dec = si("3", "", "decease", 0.9, &[]);
        assert_eq!(normalize_type_name(&[&die1, &die2, &dec]).unwrap(), "die");
        assert_eq!(normalize_type_name(&[&dec]).unwrap(), "decease");
        let a = si("4", "", "a", 0.5, &[]);
        let b = si("5", "", "b", 0.5, &[]);
        assert_eq!(normalize_type_name(&[&b, &a]).unwrap(), "a");
        assert_eq!(normalize_type_name(&[&die1, &dec]).unwrap(), "decease");
        assert!(normalize_type_name(&[]).is_none());
    }

    #[test]
    fn slot_synonyms() {
        let ens =
            SimilarityEnsemble::uniform(vec![Box::new(LexiconBackend::parse("dead\tvictim\n"))])
                .unwrap();
        let scores: HashMap<String, f64> =
            [("victim".to_string(), 2.0), ("dead".to_string(), 1.0)].into();
        let groups = merge_slot_synonyms(
            &["dead".into(), "victim".into()],
            &scores,
            &ens,
            EdgePrune::BelowMean,
            1234,
        );
        assert_eq!(
            groups,
            vec![SlotGroup {
                representative: "victim".into(),
                synonyms: vec!["dead".into()],
            }]
        );
        let groups = merge_slot_synonyms(
            &["ab".into(), "cd".into()],
            &HashMap::new(),
            &SimilarityEnsemble::lexical(),
            EdgePrune::BelowMean,
            1,
        );
        assert_eq!(groups.len(), 2);
        assert!(merge_slot_synonyms(&[], &HashMap::new(), &ens, EdgePrune::None, 1).is_empty());
    }

    #[test]
    fn singleton_cluster_equals_member() {
        let a = si(
            "1",
            "t",
            "attack",
            1.0,
            &[("attacker", 1.0), ("target", 0.5)],
        );
        let ens = SimilarityEnsemble::lexical();
        let out = aggregate(
            &[a],
            &ClusterAssignment::from_labels(&[0]),
            &ens,
            &GraphConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].render(), "Type: attack, Slots: attacker; target");
        assert_eq!(out[0].member_ids, vec!["1"]);
    }

    #[test]
    fn identical_slot_sets_union() {
        let slots = [("place", 1.0), ("time", 1.0)];
        let a = si("1", "x", "go", 1.0, &slots);
        let b = si("2", "y", "go", 1.0, &slots);
        let out = aggregate(
            &[a, b],
            &ClusterAssignment::from_labels(&[0, 0]),
            &SimilarityEnsemble::lexical(),
            &GraphConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(out[0].slot_names(), vec!["place", "time"]);
        assert_eq!(out[0].type_candidates["go"], 2);
    }

    #[test]
    fn sorted_by_cluster_size() {
        let insts: Vec<StructuredInstance> = (0..4)
            .map(|i| si(&i.to_string(), "t", &format!("t{i}"), 1.0, &[]))
            .collect();
        let out = aggregate(
            &insts,
            &ClusterAssignment::from_labels(&[0, 1, 1, 2]),
            &SimilarityEnsemble::lexical(),
            &GraphConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(out[0].member_ids, vec!["1", "2"]);
        assert_eq!(out[1].member_ids, vec!["0"]);
        assert_eq!(out[2].member_ids, vec!["3"]);
        assert!(aggregate(
            &insts,
            &ClusterAssignment::from_labels(&[0]),
            &SimilarityEnsemble::lexical(),
            &GraphConfig::default(),
            1
        )
        .is_err());
    }

    #[test]
    fn schema_json_shape() {
        let s = AggregatedSchema {
            type_name: "die".into(),
            type_candidates: [("die".to_string(), 1), ("decease".to_string(), 1)].into(),
            slot_groups: vec![SlotGroup {
                representative: "victim".into(),
                synonyms: vec!["dead".into()],
            }],
            member_ids: vec!["a".into(), "b".into()],
        };
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        assert_eq!(v["type"], "die");
        assert_eq!(v["slots"][0]["name"], "victim");
        assert_eq!(v["slots"][0]["synonyms"][0], "dead");
        assert_eq!(v["members"][1], "b");
        assert_eq!(v["type_candidates"]["decease"], 1);
    }
}
