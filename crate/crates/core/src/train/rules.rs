//! Reasoning-rule extraction: average each step's relation distribution over
//! the questions probing one relation, then take every step's argmax.

use serde::{Deserialize, Serialize};

use super::data::{question_sequence, GraphContext};
use crate::error::{OreoError, Result};
use crate::kg::k_hop_subgraph;
use crate::model::{ForwardInput, Model, Vocab};
use crate::synth::QaItem;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationScore {
    pub id: usize,
    pub name: String,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub relation: String,
    pub items: usize,
    /// Per step, every relation by descending mean probability.
    pub steps: Vec<Vec<RelationScore>>,
    pub path: Vec<String>,
}

/// Elementwise mean of per-item `[step][relation]` distributions.
pub fn average_gammas(traces: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let first = traces
        .first()
        .ok_or_else(|| OreoError::Input("no traces to average".into()))?;
    let mut acc: Vec<Vec<f64>> = first.iter().map(|g| vec![0.0; g.len()]).collect();
    for t in traces {
        if t.len() != acc.len() || t.iter().zip(&acc).any(|(a, b)| a.len() != b.len()) {
            return Err(OreoError::shape("traces differ in depth or relation count"));
        }
        for (a, g) in acc.iter_mut().zip(t) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    let n = traces.len() as f64;
    acc.iter_mut().flatten().for_each(|x| *x /= n);
    Ok(acc)
}

/// Ranks averaged distributions and reads off the argmax path. Relations with
/// `walkable[r] == false` stay in the rankings but never enter the path.
pub fn rank_path(relation: &str, items: usize, mean: &[Vec<f64>], names: &[String], walkable: &[bool]) -> PathReport {
    let mut steps = Vec::with_capacity(mean.len());
    let mut path = Vec::with_capacity(mean.len());
    for g in mean {
        let mut idx: Vec<usize> = (0..g.len()).collect();
        idx.sort_by(|&a, &b| g[b].total_cmp(&g[a]));
        steps.push(
            idx.into_iter()
                .map(|i| RelationScore {
                    id: i,
                    name: names[i].clone(),
                    prob: g[i],
                })
                .collect(),
        );
        let best = (0..g.len())
            .filter(|&i| walkable.get(i).copied().unwrap_or(true))
            .max_by(|&a, &b| g[a].total_cmp(&g[b]).then(b.cmp(&a)));
        if let Some(i) = best {
            path.push(names[i].clone());
        }
    }
    PathReport {
        relation: relation.to_string(),
        items,
        steps,
        path,
    }
}

/// Runs every question probing `relation` through the model on `ctx` and
/// reports the averaged per-step relation rankings. The path only uses
/// relations that still have edges in `ctx`, so on a graph with `relation`
/// removed it names the detour the walk actually took.
pub fn extract_rules(
    model: &Model,
    relation: &str,
    qa: &[QaItem],
    ctx: &GraphContext,
    vocab: &Vocab,
) -> Result<PathReport> {
    let probe: Vec<&QaItem> = qa.iter().filter(|q| q.relation == relation).collect();
    if probe.is_empty() {
        return Err(OreoError::Input(format!("no questions probe {relation:?}")));
    }
    if model.config().depth == 0 {
        return Err(OreoError::Input("a depth-0 model has no reasoning steps".into()));
    }
    let mut traces = Vec::with_capacity(probe.len());
    for item in &probe {
        let seq = question_sequence(item, vocab)?;
        let sub = k_hop_subgraph(&seq.entities(), model.config().hops, &ctx.kg);
        let out = model.forward(ForwardInput {
            seq: &seq,
            sub: &sub,
            wdeg: &ctx.wdeg,
        })?;
        let m = &out.trace.mentions[0];
        traces.push(m.steps.iter().map(|s| s.gamma.probs().to_vec()).collect());
    }
    let mean = average_gammas(&traces)?;
    let walkable: Vec<bool> = (0..ctx.kg.num_relations())
        .map(|r| ctx.kg.relation_edge_count(r) > 0)
        .collect();
    Ok(rank_path(
        relation,
        probe.len(),
        &mean,
        ctx.kg.relation_names(),
        &walkable,
    ))
}
