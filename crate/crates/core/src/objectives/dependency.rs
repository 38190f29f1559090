//! Grounded dependency graph: which relations lie on walks of length at most
//! `T` from a context entity to any masked entity.
//!
//! An edge `(u, r, v)` can sit at step `t` of such a walk of length `L` exactly
//! when `u` is reachable from the context entity in `t - 1` steps and some
//! masked entity is reachable from `v` in `L - t` steps. Walks may revisit
//! nodes and pass through masked entities.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{OreoError, Result};
use crate::kg::KnowledgeGraph;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedDependencyGraph {
    pub depth: usize,
    /// `sets[i][t - 1]` is `R_DG(context_i, t)`.
    pub sets: Vec<Vec<BTreeSet<usize>>>,
}

impl GroundedDependencyGraph {
    pub fn relations(&self, mention: usize, t: usize) -> &BTreeSet<usize> {
        &self.sets[mention][t - 1]
    }

    /// Uniform relation labels `q`, or `None` where the set is empty.
    pub fn labels(&self, num_relations: usize) -> Vec<Vec<Option<Vec<f64>>>> {
        self.sets
            .iter()
            .map(|steps| {
                steps
                    .iter()
                    .map(|s| {
                        if s.is_empty() {
                            return None;
                        }
                        let mut q = vec![0.0; num_relations];
                        for &r in s {
                            q[r] = 1.0 / s.len() as f64;
                        }
                        Some(q)
                    })
                    .collect()
            })
            .collect()
    }
}

fn step_forward(kg: &KnowledgeGraph, from: &[bool]) -> Vec<bool> {
    let mut out = vec![false; from.len()];
    for (u, _) in from.iter().enumerate().filter(|(_, &f)| f) {
        for e in kg.out_edges(u) {
            out[e.tgt] = true;
        }
    }
    out
}

fn step_backward(kg: &KnowledgeGraph, to: &[bool]) -> Vec<bool> {
    let mut out = vec![false; to.len()];
    for e in kg.edges() {
        if to[e.tgt] {
            out[e.src] = true;
        }
    }
    out
}

pub fn build_dependency_graph(
    kg: &KnowledgeGraph,
    context_entities: &[usize],
    masked_entities: &[usize],
    depth: usize,
) -> Result<GroundedDependencyGraph> {
    if depth == 0 {
        return Err(OreoError::Input("dependency graph needs depth of at least 1".into()));
    }
    let n = kg.num_entities();
    if let Some(&e) = context_entities.iter().chain(masked_entities).find(|&&e| e >= n) {
        return Err(OreoError::Index { index: e, extent: n });
    }
    // back[s][v]: some masked entity is reachable from v in exactly s steps
    let mut back = Vec::with_capacity(depth);
    let mut b = vec![false; n];
    for &e in masked_entities {
        b[e] = true;
    }
    back.push(b);
    for s in 1..depth {
        let next = step_backward(kg, &back[s - 1]);
        back.push(next);
    }
    // within[s][v]: reachable to a target within 0..=s remaining steps
    let mut within = back.clone();
    for s in 1..depth {
        for v in 0..n {
            within[s][v] |= within[s - 1][v];
        }
    }
    let mut sets = Vec::with_capacity(context_entities.len());
    for &c in context_entities {
        let mut steps = vec![BTreeSet::new(); depth];
        let mut front = vec![false; n];
        front[c] = true;
        for t in 1..=depth {
            let tail = &within[depth - t];
            for (u, _) in front.iter().enumerate().filter(|(_, &f)| f) {
                for e in kg.out_edges(u) {
                    if tail[e.tgt] {
                        steps[t - 1].insert(e.rel);
                    }
                }
            }
            front = step_forward(kg, &front);
        }
        sets.push(steps);
    }
    Ok(GroundedDependencyGraph { depth, sets })
}
