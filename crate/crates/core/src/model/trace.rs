//! Reasoning traces: the per-mention walk `π⁰, (γ¹, π¹), …`.

use serde::{Deserialize, Serialize};

use crate::crw::{EntityDistribution, RelationDistribution};
use crate::kg::KnowledgeGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub gamma: RelationDistribution,
    pub pi: EntityDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MentionTrace {
    pub entity: usize,
    pub pi0: EntityDistribution,
    pub steps: Vec<TraceStep>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    /// Global ids of the subgraph entity list the distributions are aligned to.
    pub entities: Vec<usize>,
    pub mentions: Vec<MentionTrace>,
}

/// One exported `(mention, step)` record with its top-k relations and entities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub mention: usize,
    pub entity: String,
    pub step: usize,
    pub relations: Vec<(String, f64)>,
    pub entities: Vec<(String, f64)>,
}

fn top_k(probs: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    // stable sort keeps the lower index first on ties
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    idx.into_iter().take(k).map(|i| (i, probs[i])).collect()
}

impl ReasoningTrace {
    pub fn depth(&self) -> usize {
        self.mentions.first().map_or(0, |m| m.steps.len())
    }

    pub fn records(&self, kg: &KnowledgeGraph, k: usize) -> Vec<TraceRecord> {
        let mut out = Vec::new();
        for (i, m) in self.mentions.iter().enumerate() {
            for (t, s) in m.steps.iter().enumerate() {
                out.push(TraceRecord {
                    mention: i,
                    entity: kg.entity_name(m.entity).to_string(),
                    step: t + 1,
                    relations: top_k(s.gamma.probs(), k)
                        .into_iter()
                        .map(|(r, p)| (kg.relation_name(r).to_string(), p))
                        .collect(),
                    entities: top_k(s.pi.probs(), k)
                        .into_iter()
                        .map(|(e, p)| (kg.entity_name(self.entities[e]).to_string(), p))
                        .collect(),
                });
            }
        }
        out
    }
}
