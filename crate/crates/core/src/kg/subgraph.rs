//! k-hop subgraph extraction with local re-indexing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{KnowledgeGraph, Triple};

/// Entities within `K` directed hops of a seed set, plus the edges leaving
/// entities within `K - 1` hops, with endpoints as local positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphIndex {
    /// Sorted global entity ids (`I`).
    pub entities: Vec<usize>,
    pub src: Vec<usize>,
    pub rel: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl SubgraphIndex {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    /// Local position of a global entity id.
    pub fn local(&self, entity: usize) -> Option<usize> {
        self.entities.binary_search(&entity).ok()
    }

    /// Edges mapped back to global ids.
    pub fn global_edges(&self) -> impl Iterator<Item = Triple> + '_ {
        (0..self.num_edges()).map(|k| Triple::new(self.entities[self.src[k]], self.rel[k], self.entities[self.tgt[k]]))
    }
}

pub fn k_hop_subgraph(init: &[usize], k: usize, kg: &KnowledgeGraph) -> SubgraphIndex {
    let n = kg.num_entities();
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for &e in init {
        if dist[e] != 0 {
            dist[e] = 0;
            queue.push_back(e);
        }
    }
    while let Some(u) = queue.pop_front() {
        if dist[u] >= k {
            continue;
        }
        for e in kg.out_edges(u) {
            if dist[e.tgt] == usize::MAX {
                dist[e.tgt] = dist[u] + 1;
                queue.push_back(e.tgt);
            }
        }
    }
    let entities: Vec<usize> = (0..n).filter(|&e| dist[e] <= k).collect();
    let mut local = vec![usize::MAX; n];
    for (i, &e) in entities.iter().enumerate() {
        local[e] = i;
    }
    let (mut src, mut rel, mut tgt) = (Vec::new(), Vec::new(), Vec::new());
    for &e in &entities {
        if dist[e] >= k {
            continue;
        }
        for t in kg.out_edges(e) {
            src.push(local[t.src]);
            rel.push(t.rel);
            tgt.push(local[t.tgt]);
        }
    }
    SubgraphIndex {
        entities,
        src,
        rel,
        tgt,
    }
}
