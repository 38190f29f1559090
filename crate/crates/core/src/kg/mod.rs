//! Immutable sparse knowledge graph.
//!
//! Edges are kept sorted by `(src, rel, tgt)`, which doubles as a CSR layout
//! over source entities. Each relation also gets its own CSR adjacency.

mod io;
mod subgraph;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{OreoError, Result};

pub use io::{load_dir, load_triples, write_triples, ENTITIES_FILE, RELATIONS_FILE, TRIPLES_FILE};
pub use subgraph::{k_hop_subgraph, SubgraphIndex};

/// Suffix appended to relation names by inverse closure.
pub const INVERSE_SUFFIX: &str = "-R";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub src: usize,
    pub rel: usize,
    pub tgt: usize,
}

impl Triple {
    pub fn new(src: usize, rel: usize, tgt: usize) -> Self {
        Triple { src, rel, tgt }
    }
}

/// Compressed sparse rows: targets of row `i` are `targets[offsets[i]..offsets[i+1]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Csr {
    fn build(n: usize, pairs: impl Iterator<Item = (usize, usize)>) -> Csr {
        let mut pairs: Vec<(usize, usize)> = pairs.collect();
        pairs.sort_unstable();
        let mut offsets = vec![0; n + 1];
        for &(s, _) in &pairs {
            offsets[s + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        Csr {
            offsets,
            targets: pairs.into_iter().map(|(_, t)| t).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn nnz(&self) -> usize {
        self.targets.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    entity_names: Vec<String>,
    relation_names: Vec<String>,
    base_relations: usize,
    inverse_closed: bool,
    edges: Vec<Triple>,
    src_offsets: Vec<usize>,
    adjacency: Vec<Csr>,
    out_degree: Vec<usize>,
}

impl KnowledgeGraph {
    /// Builds a graph from triples, dropping duplicates.
    pub fn new(
        entity_names: Vec<String>,
        relation_names: Vec<String>,
        triples: impl IntoIterator<Item = Triple>,
    ) -> Result<Self> {
        let n_rel = relation_names.len();
        Self::build(entity_names, relation_names, n_rel, false, triples)
    }

    /// Graph with anonymous entity/relation names `e<i>` and `r<j>`.
    pub fn from_triples(
        num_entities: usize,
        num_relations: usize,
        triples: impl IntoIterator<Item = Triple>,
    ) -> Result<Self> {
        Self::new(
            (0..num_entities).map(|i| format!("e{i}")).collect(),
            (0..num_relations).map(|i| format!("r{i}")).collect(),
            triples,
        )
    }

    fn build(
        entity_names: Vec<String>,
        relation_names: Vec<String>,
        base_relations: usize,
        inverse_closed: bool,
        triples: impl IntoIterator<Item = Triple>,
    ) -> Result<Self> {
        let (n, r) = (entity_names.len(), relation_names.len());
        let mut set = BTreeSet::new();
        for t in triples {
            if t.src >= n || t.tgt >= n {
                return Err(OreoError::Index {
                    index: t.src.max(t.tgt),
                    extent: n,
                });
            }
            if t.rel >= r {
                return Err(OreoError::Index {
                    index: t.rel,
                    extent: r,
                });
            }
            set.insert(t);
        }
        let edges: Vec<Triple> = set.into_iter().collect();
        let mut out_degree = vec![0; n];
        for e in &edges {
            out_degree[e.src] += 1;
        }
        let mut src_offsets = vec![0; n + 1];
        for i in 0..n {
            src_offsets[i + 1] = src_offsets[i] + out_degree[i];
        }
        let adjacency = (0..r)
            .map(|rel| Csr::build(n, edges.iter().filter(|e| e.rel == rel).map(|e| (e.src, e.tgt))))
            .collect();
        Ok(KnowledgeGraph {
            entity_names,
            relation_names,
            base_relations,
            inverse_closed,
            edges,
            src_offsets,
            adjacency,
            out_degree,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    /// Relation count before inverse closure.
    pub fn num_base_relations(&self) -> usize {
        self.base_relations
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_inverse_closed(&self) -> bool {
        self.inverse_closed
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn entity_name(&self, e: usize) -> &str {
        &self.entity_names[e]
    }

    pub fn relation_name(&self, r: usize) -> &str {
        &self.relation_names[r]
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_names.iter().position(|n| n == name)
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_names.iter().position(|n| n == name)
    }

    /// All edges in canonical `(src, rel, tgt)` order.
    pub fn edges(&self) -> &[Triple] {
        &self.edges
    }

    /// Outgoing edges of `e` across all relations.
    pub fn out_edges(&self, e: usize) -> &[Triple] {
        &self.edges[self.src_offsets[e]..self.src_offsets[e + 1]]
    }

    pub fn out_degree(&self) -> &[usize] {
        &self.out_degree
    }

    pub fn adjacency(&self, rel: usize) -> &Csr {
        &self.adjacency[rel]
    }

    pub fn contains(&self, t: Triple) -> bool {
        self.out_edges(t.src).binary_search(&t).is_ok()
    }

    pub fn relation_edge_count(&self, rel: usize) -> usize {
        self.adjacency[rel].nnz()
    }

    /// `inv(r)` under closure; `None` when the graph is not closed.
    pub fn inverse_of(&self, rel: usize) -> Option<usize> {
        if !self.inverse_closed || rel >= self.relation_names.len() {
            return None;
        }
        let b = self.base_relations;
        Some(if rel < b { rel + b } else { rel - b })
    }

    /// Adds `(t, r + |R|, s)` for every edge `(s, r, t)`.
    pub fn add_inverse_relations(&self) -> Result<KnowledgeGraph> {
        if self.inverse_closed {
            return Err(OreoError::Input("graph already carries inverse relations".into()));
        }
        let b = self.relation_names.len();
        let mut names = self.relation_names.clone();
        names.extend(self.relation_names.iter().map(|n| format!("{n}{INVERSE_SUFFIX}")));
        let triples = self
            .edges
            .iter()
            .copied()
            .chain(self.edges.iter().map(|e| Triple::new(e.tgt, e.rel + b, e.src)));
        Self::build(self.entity_names.clone(), names, b, true, triples)
    }

    /// Copy without any edge of `rel` (nor of its inverse on closed graphs).
    pub fn remove_relation_edges(&self, rel: usize) -> Result<KnowledgeGraph> {
        if rel >= self.num_relations() {
            return Err(OreoError::Input(format!("unknown relation id {rel}")));
        }
        let inv = self.inverse_of(rel);
        let kept = self
            .edges
            .iter()
            .copied()
            .filter(|e| e.rel != rel && Some(e.rel) != inv);
        Self::build(
            self.entity_names.clone(),
            self.relation_names.clone(),
            self.base_relations,
            self.inverse_closed,
            kept,
        )
    }

    /// Edges whose relation predates closure.
    pub fn base_edges(&self) -> impl Iterator<Item = &Triple> {
        self.edges.iter().filter(|e| e.rel < self.base_relations)
    }
}
