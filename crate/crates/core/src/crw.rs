//! Contextualized random walk.
//!
//! One transition gathers entity mass (scaled by inverse out-degree) and
//! relation mass (scaled by relation importance) onto every subgraph edge,
//! scatters the product to edge targets and L1-normalizes the result per
//! mention. Normalizing after the scatter is the same as normalizing the edge
//! vector first, because scatter-add preserves the total. A mention whose
//! total edge mass is zero keeps its previous distribution.

use serde::{Deserialize, Serialize};

use crate::error::{OreoError, Result};
use crate::kg::{KnowledgeGraph, SubgraphIndex};
use crate::numerics::{ParamSet, Tape, Tensor, Var};

/// Tolerance for the probability-vector invariants.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

/// Largest graph the dense oracle will materialize.
pub const DENSE_ORACLE_CAPACITY: usize = 1000;

fn validate_distribution(probs: &[f64], what: &str) -> Result<()> {
    if probs.is_empty() {
        return Err(OreoError::shape(format!("empty {what}")));
    }
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(OreoError::Domain(format!("{what} has invalid entry {p}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(OreoError::Domain(format!("{what} sums to {total}")));
    }
    Ok(())
}

/// Walker position belief over the subgraph entity list `I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityDistribution {
    probs: Vec<f64>,
}

impl EntityDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        validate_distribution(&probs, "entity distribution")?;
        Ok(EntityDistribution { probs })
    }

    pub fn one_hot(len: usize, at: usize) -> Result<Self> {
        if at >= len {
            return Err(OreoError::Index { index: at, extent: len });
        }
        let mut probs = vec![0.0; len];
        probs[at] = 1.0;
        Ok(EntityDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationDistribution {
    probs: Vec<f64>,
}

impl RelationDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        validate_distribution(&probs, "relation distribution")?;
        Ok(RelationDistribution { probs })
    }

    pub fn uniform(n: usize) -> Self {
        RelationDistribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Positive per-relation weights, stored as logarithms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationImportance {
    log_weights: Vec<f64>,
}

impl RelationImportance {
    /// All weights equal to one.
    pub fn neutral(n: usize) -> Self {
        RelationImportance {
            log_weights: vec![0.0; n],
        }
    }

    pub fn from_log_weights(log_weights: Vec<f64>) -> Self {
        RelationImportance { log_weights }
    }

    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0)) {
            return Err(OreoError::Domain(format!("relation weight {w} is not positive")));
        }
        Ok(RelationImportance {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
        })
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|v| v.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }
}

/// `1 / out_degree(e)`, or 0 for entities without outgoing edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeWeights {
    w: Vec<f64>,
}

impl DegreeWeights {
    pub fn from_graph(kg: &KnowledgeGraph) -> Self {
        DegreeWeights {
            w: kg
                .out_degree()
                .iter()
                .map(|&d| if d == 0 { 0.0 } else { 1.0 / d as f64 })
                .collect(),
        }
    }

    pub fn global(&self) -> &[f64] {
        &self.w
    }

    /// Weights aligned to the subgraph entity list.
    pub fn local(&self, sub: &SubgraphIndex) -> Vec<f64> {
        sub.entities.iter().map(|&e| self.w[e]).collect()
    }
}

/// Differentiable batched transition on a tape.
///
/// `pi` is `[n, |I|]`, `gamma` is `[n, |R|]`, `weights` is `[|R|]` (already
/// exponentiated); the result is `[n, |I|]`.
pub fn transition_on_tape(
    tape: &mut Tape<'_>,
    pi: Var,
    gamma: Var,
    weights: Var,
    sub: &SubgraphIndex,
    wdeg_local: &[f64],
) -> Result<Var> {
    let i_len = sub.len();
    if tape.value(pi).cols() != i_len || wdeg_local.len() != i_len {
        return Err(OreoError::shape(format!(
            "entity distribution width {} vs subgraph size {i_len}",
            tape.value(pi).cols()
        )));
    }
    let n_rel = tape.value(weights).len();
    if tape.value(gamma).cols() != n_rel || tape.value(gamma).rows() != tape.value(pi).rows() {
        return Err(OreoError::shape(format!(
            "relation distribution {:?} vs weights {n_rel} / entity rows {}",
            tape.value(gamma).shape(),
            tape.value(pi).rows()
        )));
    }
    if let Some(&r) = sub.rel.iter().find(|&&r| r >= n_rel) {
        return Err(OreoError::Index {
            index: r,
            extent: n_rel,
        });
    }
    let wdeg = tape.constant(Tensor::vector(wdeg_local.to_vec()));
    let src_mass = tape.mul_row(pi, wdeg)?;
    let p_src = tape.gather_cols(src_mass, &sub.src)?;
    let rel_mass = tape.mul_row(gamma, weights)?;
    let p_rel = tape.gather_cols(rel_mass, &sub.rel)?;
    let p_edge = tape.mul(p_src, p_rel)?;
    let mass = tape.scatter_add_cols(p_edge, &sub.tgt, i_len)?;
    tape.l1_normalize_rows(mass, pi)
}

fn stack(rows: &[&[f64]]) -> Result<Tensor> {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

/// Batched transition for several mentions sharing one subgraph.
pub fn batched_transition(
    pis: &[EntityDistribution],
    gammas: &[RelationDistribution],
    sub: &SubgraphIndex,
    wdeg: &DegreeWeights,
    w: &RelationImportance,
) -> Result<Vec<EntityDistribution>> {
    if pis.len() != gammas.len() {
        return Err(OreoError::shape(format!(
            "{} entity distributions for {} relation distributions",
            pis.len(),
            gammas.len()
        )));
    }
    if pis.is_empty() {
        return Ok(Vec::new());
    }
    let params = ParamSet::new();
    let mut tape = Tape::new(&params);
    let pi = tape.constant(stack(&pis.iter().map(|p| p.probs()).collect::<Vec<_>>())?);
    let gamma = tape.constant(stack(&gammas.iter().map(|g| g.probs()).collect::<Vec<_>>())?);
    let weights = tape.constant(Tensor::vector(w.weights()));
    let out = transition_on_tape(&mut tape, pi, gamma, weights, sub, &wdeg.local(sub))?;
    let t = tape.value(out);
    Ok((0..t.rows())
        .map(|r| EntityDistribution {
            probs: t.row(r).to_vec(),
        })
        .collect())
}

/// One transition step for a single mention.
pub fn crw_transition(
    pi: &EntityDistribution,
    gamma: &RelationDistribution,
    sub: &SubgraphIndex,
    wdeg: &DegreeWeights,
    w: &RelationImportance,
) -> Result<EntityDistribution> {
    let mut out = batched_transition(std::slice::from_ref(pi), std::slice::from_ref(gamma), sub, wdeg, w)?;
    Ok(out.pop().expect("one output per input"))
}

/// How the dense reference normalizes the weighted adjacency.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransitionSemantics {
    /// Unweighted inverse degree, then one global L1 normalization (the canonical walk).
    Scatter,
    /// Each row of the weighted adjacency divided by its weighted degree.
    WeightedRowNormalized,
}

/// Dense reference: materializes `Ã = Σ_r w_r γ_r A_r` over the whole graph.
///
/// `pi` is indexed by global entity id.
pub fn dense_transition_oracle(
    pi: &[f64],
    gamma: &[f64],
    kg: &KnowledgeGraph,
    w: &RelationImportance,
) -> Result<Vec<f64>> {
    dense_transition_with(pi, gamma, kg, w, TransitionSemantics::Scatter)
}

pub fn dense_transition_with(
    pi: &[f64],
    gamma: &[f64],
    kg: &KnowledgeGraph,
    w: &RelationImportance,
    semantics: TransitionSemantics,
) -> Result<Vec<f64>> {
    let n = kg.num_entities();
    if n > DENSE_ORACLE_CAPACITY {
        return Err(OreoError::Capacity(format!(
            "dense oracle supports at most {DENSE_ORACLE_CAPACITY} entities, graph has {n}"
        )));
    }
    if pi.len() != n || gamma.len() != kg.num_relations() || w.len() != kg.num_relations() {
        return Err(OreoError::shape("dense oracle input lengths"));
    }
    let weights = w.weights();
    let mut a = vec![vec![0.0; n]; n];
    for r in 0..kg.num_relations() {
        let adj = kg.adjacency(r);
        for s in 0..n {
            for &t in adj.row(s) {
                a[s][t] += weights[r] * gamma[r];
            }
        }
    }
    let mut m = vec![0.0; n];
    match semantics {
        TransitionSemantics::Scatter => {
            let deg = kg.out_degree();
            for s in 0..n {
                if deg[s] == 0 {
                    continue;
                }
                let scale = pi[s] / deg[s] as f64;
                for t in 0..n {
                    m[t] += scale * a[s][t];
                }
            }
        }
        TransitionSemantics::WeightedRowNormalized => {
            for s in 0..n {
                let row_total: f64 = a[s].iter().sum();
                if row_total == 0.0 {
                    continue;
                }
                for t in 0..n {
                    m[t] += pi[s] * a[s][t] / row_total;
                }
            }
        }
    }
    let total: f64 = m.iter().sum();
    if total > 0.0 {
        Ok(m.into_iter().map(|v| v / total).collect())
    } else {
        Ok(pi.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{k_hop_subgraph, Triple};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// a=0 -r0-> b=1, a -r1-> c=2
    fn fork() -> KnowledgeGraph {
        KnowledgeGraph::from_triples(3, 2, [Triple::new(0, 0, 1), Triple::new(0, 1, 2)]).unwrap()
    }

    fn full_sub(kg: &KnowledgeGraph) -> SubgraphIndex {
        let all: Vec<usize> = (0..kg.num_entities()).collect();
        k_hop_subgraph(&all, 1, kg)
    }

    #[test]
    fn single_surviving_edge() {
        let kg = fork();
        let sub = full_sub(&kg);
        let pi = EntityDistribution::one_hot(3, 0).unwrap();
        let gamma = RelationDistribution::new(vec![1.0, 0.0]).unwrap();
        let out = crw_transition(
            &pi,
            &gamma,
            &sub,
            &DegreeWeights::from_graph(&kg),
            &RelationImportance::neutral(2),
        )
        .unwrap();
        assert_eq!(out.probs(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn even_split_matches_dense_oracle() {
        let kg = fork();
        let sub = full_sub(&kg);
        let pi = EntityDistribution::one_hot(3, 0).unwrap();
        let gamma = RelationDistribution::uniform(2);
        let w = RelationImportance::neutral(2);
        let out = crw_transition(&pi, &gamma, &sub, &DegreeWeights::from_graph(&kg), &w).unwrap();
        let dense = dense_transition_oracle(&[1.0, 0.0, 0.0], gamma.probs(), &kg, &w).unwrap();
        assert_eq!(dense, vec![0.0, 0.5, 0.5]);
        for (a, b) in out.probs().iter().zip(&dense) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn dead_end_keeps_distribution() {
        let kg = fork();
        let sub = full_sub(&kg);
        let pi = EntityDistribution::one_hot(3, 2).unwrap();
        let out = crw_transition(
            &pi,
            &RelationDistribution::uniform(2),
            &sub,
            &DegreeWeights::from_graph(&kg),
            &RelationImportance::neutral(2),
        )
        .unwrap();
        assert_eq!(out, pi);
    }

    #[test]
    fn misaligned_inputs_are_shape_errors() {
        let kg = fork();
        let sub = full_sub(&kg);
        let wdeg = DegreeWeights::from_graph(&kg);
        let pi = EntityDistribution::one_hot(2, 0).unwrap();
        let err = crw_transition(
            &pi,
            &RelationDistribution::uniform(2),
            &sub,
            &wdeg,
            &RelationImportance::neutral(2),
        );
        assert!(matches!(err, Err(OreoError::Shape(_))));
        let pi = EntityDistribution::one_hot(3, 0).unwrap();
        let err = crw_transition(
            &pi,
            &RelationDistribution::uniform(3),
            &sub,
            &wdeg,
            &RelationImportance::neutral(2),
        );
        assert!(matches!(err, Err(OreoError::Shape(_))));
        let err = batched_transition(&[pi], &[], &sub, &wdeg, &RelationImportance::neutral(2));
        assert!(matches!(err, Err(OreoError::Shape(_))));
    }

    #[test]
    fn identity_graph_is_fixed_point() {
        let kg = KnowledgeGraph::from_triples(4, 1, (0..4).map(|i| Triple::new(i, 0, i))).unwrap();
        let pi = vec![0.1, 0.2, 0.3, 0.4];
        let out = dense_transition_oracle(&pi, &[1.0], &kg, &RelationImportance::neutral(1)).unwrap();
        for (a, b) in out.iter().zip(&pi) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn dense_oracle_matches_hand_summation() {
        // 0 -r0-> 1, 0 -r1-> 2, 1 -r0-> 2, 2 -r1-> 0, 2 -r0-> 1
        let kg = KnowledgeGraph::from_triples(
            3,
            2,
            [
                Triple::new(0, 0, 1),
                Triple::new(0, 1, 2),
                Triple::new(1, 0, 2),
                Triple::new(2, 1, 0),
                Triple::new(2, 0, 1),
            ],
        )
        .unwrap();
        let pi = [0.5, 0.3, 0.2];
        let gamma = [0.7, 0.3];
        let w = RelationImportance::from_weights(&[2.0, 0.5]).unwrap();
        // edge masses π[s]/deg(s) · γ_r w_r
        let e01 = 0.5 / 2.0 * 0.7 * 2.0;
        let e02 = 0.5 / 2.0 * 0.3 * 0.5;
        let e12 = 0.3 / 1.0 * 0.7 * 2.0;
        let e20 = 0.2 / 2.0 * 0.3 * 0.5;
        let e21 = 0.2 / 2.0 * 0.7 * 2.0;
        let total = e01 + e02 + e12 + e20 + e21;
        let want = [e20 / total, (e01 + e21) / total, (e02 + e12) / total];
        let dense = dense_transition_oracle(&pi, &gamma, &kg, &w).unwrap();
        let sparse = crw_transition(
            &EntityDistribution::new(pi.to_vec()).unwrap(),
            &RelationDistribution::new(gamma.to_vec()).unwrap(),
            &full_sub(&kg),
            &DegreeWeights::from_graph(&kg),
            &w,
        )
        .unwrap();
        for i in 0..3 {
            assert!((dense[i] - want[i]).abs() < 1e-15);
            assert!((sparse.probs()[i] - want[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn regular_graph_reduces_to_uniform_walk() {
        // directed 2-regular ring with chords, one relation
        let n = 6;
        let triples: Vec<Triple> = (0..n)
            .flat_map(|i| [Triple::new(i, 0, (i + 1) % n), Triple::new(i, 0, (i + 3) % n)])
            .collect();
        let kg = KnowledgeGraph::from_triples(n, 1, triples).unwrap();
        let pi = [0.05, 0.25, 0.1, 0.3, 0.2, 0.1];
        let out = dense_transition_oracle(&pi, &[1.0], &kg, &RelationImportance::neutral(1)).unwrap();
        // π · D⁻¹A
        let mut want = vec![0.0; n];
        for i in 0..n {
            want[(i + 1) % n] += pi[i] / 2.0;
            want[(i + 3) % n] += pi[i] / 2.0;
        }
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn oracle_capacity_error() {
        let kg = KnowledgeGraph::from_triples(1001, 1, []).unwrap();
        let err = dense_transition_oracle(&vec![0.0; 1001], &[1.0], &kg, &RelationImportance::neutral(1));
        assert!(matches!(err, Err(OreoError::Capacity(_))));
    }

    #[test]
    fn batched_equals_single_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let triples: Vec<Triple> = (0..60)
            .map(|_| Triple::new(rng.gen_range(0..15), rng.gen_range(0..3), rng.gen_range(0..15)))
            .collect();
        let kg = KnowledgeGraph::from_triples(15, 3, triples).unwrap();
        let sub = k_hop_subgraph(&[0, 4], 2, &kg);
        let wdeg = DegreeWeights::from_graph(&kg);
        let w = RelationImportance::from_log_weights(vec![0.3, -0.2, 0.1]);
        let mut pis = Vec::new();
        let mut gammas = Vec::new();
        for _ in 0..3 {
            let raw: Vec<f64> = (0..sub.len()).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            pis.push(EntityDistribution::new(raw.iter().map(|v| v / s).collect()).unwrap());
            let raw: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            gammas.push(RelationDistribution::new(raw.iter().map(|v| v / s).collect()).unwrap());
        }
        let batched = batched_transition(&pis, &gammas, &sub, &wdeg, &w).unwrap();
        for i in 0..3 {
            let single = crw_transition(&pis[i], &gammas[i], &sub, &wdeg, &w).unwrap();
            assert_eq!(single, batched[i]);
        }
        let one = batched_transition(&pis[..1], &gammas[..1], &sub, &wdeg, &w).unwrap();
        assert_eq!(one[0], crw_transition(&pis[0], &gammas[0], &sub, &wdeg, &w).unwrap());
    }

    #[test]
    fn row_normalized_variant_differs_on_nonuniform_degrees() {
        // 0 -r0-> 1, 0 -r1-> 2, 3 -r0-> 2 : weighted degrees of 0 and 3 differ
        let kg = KnowledgeGraph::from_triples(4, 2, [Triple::new(0, 0, 1), Triple::new(0, 1, 2), Triple::new(3, 0, 2)])
            .unwrap();
        let pi = [0.5, 0.0, 0.0, 0.5];
        let gamma = [0.9, 0.1];
        let w = RelationImportance::neutral(2);
        let a = dense_transition_with(&pi, &gamma, &kg, &w, TransitionSemantics::Scatter).unwrap();
        let b = dense_transition_with(&pi, &gamma, &kg, &w, TransitionSemantics::WeightedRowNormalized).unwrap();
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((a[1] - b[1]).abs() > 1e-3);
    }
}
