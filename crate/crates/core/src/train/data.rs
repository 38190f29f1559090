//! Turning passages and questions into model inputs with their targets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crw::DegreeWeights;
use crate::error::{OreoError, Result};
use crate::kg::{k_hop_subgraph, KnowledgeGraph, SubgraphIndex};
use crate::model::{instrument, AnswerScope, ForwardInput, InstrumentedSequence, Model, Vocab};
use crate::numerics::{Tape, Tensor, Var};
use crate::objectives::{
    build_dependency_graph, loss_ent, loss_rel, loss_ssm, mask_passage, LossWeights, MaskingPolicy, Passage,
};
use crate::synth::QaItem;

/// Graph as the model sees it: optionally inverse-closed, with degree weights.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub kg: KnowledgeGraph,
    pub wdeg: DegreeWeights,
}

impl GraphContext {
    pub fn new(base: &KnowledgeGraph, inverse_closure: bool) -> Result<Self> {
        let kg = if inverse_closure && !base.is_inverse_closed() {
            base.add_inverse_relations()?
        } else {
            base.clone()
        };
        Ok(Self::from_graph(kg))
    }

    pub fn from_graph(kg: KnowledgeGraph) -> Self {
        let wdeg = DegreeWeights::from_graph(&kg);
        GraphContext { kg, wdeg }
    }

    /// Same graph without the edges of `relation` (and its inverse).
    pub fn without_relation(&self, relation: &str) -> Result<Self> {
        let r = self
            .kg
            .relation_id(relation)
            .ok_or_else(|| OreoError::Input(format!("unknown relation {relation:?}")))?;
        Ok(Self::from_graph(self.kg.remove_relation_edges(r)?))
    }
}

/// Where an example came from, for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Passage(usize),
    Question(usize),
    Custom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub origin: Origin,
    pub seq: InstrumentedSequence,
    pub sub: SubgraphIndex,
    /// `(position, token)` masked-token targets.
    pub targets: Vec<(usize, usize)>,
    pub rel_labels: Vec<Vec<Option<Vec<f64>>>>,
    /// `(position, subgraph-local entity)` pairs scored by the entity head:
    /// the answer slot of a question, or the masked entity mentions of a passage.
    pub entity_targets: Vec<(usize, usize)>,
}

fn labels(
    ctx: &GraphContext,
    seq: &InstrumentedSequence,
    targets: &[usize],
    depth: usize,
) -> Result<Vec<Vec<Option<Vec<f64>>>>> {
    if depth == 0 || seq.mentions.is_empty() {
        return Ok(Vec::new());
    }
    let g = build_dependency_graph(&ctx.kg, &seq.entities(), targets, depth)?;
    Ok(g.labels(ctx.kg.num_relations()))
}

/// Masks a passage and attaches its subgraph and relation labels.
pub fn passage_example(
    passage: &Passage,
    index: usize,
    policy: &MaskingPolicy,
    ctx: &GraphContext,
    depth: usize,
    hops: usize,
    rng: &mut impl Rng,
) -> Result<Example> {
    let mp = mask_passage(passage, policy, rng)?;
    let sub = k_hop_subgraph(&mp.seq.entities(), hops, &ctx.kg);
    let rel_labels = labels(ctx, &mp.seq, &mp.masked_entities, depth)?;
    // masked entities outside the subgraph cannot be scored
    let mut entity_targets: Vec<(usize, usize)> = passage
        .mentions
        .iter()
        .filter(|m| mp.masked_entities.binary_search(&m.entity).is_ok())
        .filter_map(|m| Some((mp.seq.positions[m.start], sub.local(m.entity)?)))
        .collect();
    entity_targets.sort_unstable();
    entity_targets.dedup_by_key(|t| t.0);
    Ok(Example {
        origin: Origin::Passage(index),
        seq: mp.seq,
        sub,
        targets: mp.targets,
        rel_labels,
        entity_targets,
    })
}

/// Instruments a question; the answer slot is the trailing `[MASK]`.
pub fn question_sequence(item: &QaItem, vocab: &Vocab) -> Result<InstrumentedSequence> {
    let tokens = vocab.encode(&item.tokens)?;
    let mut seq = instrument(&tokens, &item.mentions)?;
    seq.answer = Some(seq.positions[item.answer_index()]);
    Ok(seq)
}

pub fn question_example(
    item: &QaItem,
    index: usize,
    vocab: &Vocab,
    ctx: &GraphContext,
    depth: usize,
    hops: usize,
) -> Result<Example> {
    let seq = question_sequence(item, vocab)?;
    let sub = k_hop_subgraph(&seq.entities(), hops, &ctx.kg);
    let rel_labels = labels(ctx, &seq, &[item.answer], depth)?;
    Ok(Example {
        origin: Origin::Question(index),
        entity_targets: seq.answer.zip(sub.local(item.answer)).into_iter().collect(),
        seq,
        sub,
        targets: Vec::new(),
        rel_labels,
    })
}

/// Per-example loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ssm: f64,
    pub ent: f64,
    pub rel: f64,
    pub answer: f64,
    pub total: f64,
}

impl LossParts {
    pub fn add_scaled(&mut self, o: &LossParts, c: f64) {
        self.ssm += c * o.ssm;
        self.ent += c * o.ent;
        self.rel += c * o.rel;
        self.answer += c * o.answer;
        self.total += c * o.total;
    }
}

/// Records `l_ssm + λ_ent l_ent + λ_rel l_rel + λ_ans l_ans` for one example.
pub fn example_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    ex: &Example,
    ctx: &GraphContext,
    weights: LossWeights,
    answer_weight: f64,
) -> Result<(Var, LossParts)> {
    let vars = model.forward_tape(
        tape,
        ForwardInput {
            seq: &ex.seq,
            sub: &ex.sub,
            wdeg: &ctx.wdeg,
        },
    )?;
    let ssm = if ex.targets.is_empty() {
        loss_ssm(tape, None, &[])?
    } else {
        let pos: Vec<usize> = ex.targets.iter().map(|t| t.0).collect();
        let toks: Vec<usize> = ex.targets.iter().map(|t| t.1).collect();
        let logits = model.encoder().token_logits(tape, vars.hidden, &pos)?;
        loss_ssm(tape, Some(logits), &toks)?
    };
    let ent = match vars.pis.first() {
        Some(&p0) => {
            let pi0 = tape.value(p0).clone();
            let logits = model.mention_entity_logits(tape, &vars)?;
            loss_ent(tape, logits, &pi0)?
        }
        None => loss_ent(tape, None, &Tensor::zeros(&[0, 0]))?,
    };
    let rel = loss_rel(tape, &vars.rel_logits, &ex.rel_labels)?;
    let answer = if ex.entity_targets.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let mut terms = Vec::with_capacity(ex.entity_targets.len());
        for &(pos, gold) in &ex.entity_targets {
            let logits = model.answer_logits(tape, &vars, pos, AnswerScope::Subgraph(&ex.sub))?;
            let mut target = Tensor::zeros(&[1, ex.sub.len()]);
            target.data_mut()[gold] = 1.0;
            let ce = tape.softmax_cross_entropy(logits, target)?;
            terms.push(tape.sum(ce));
        }
        let total = tape.add_scalars(&terms)?;
        tape.scale(total, 1.0 / terms.len() as f64)
    };
    let base = crate::objectives::total_loss_on_tape(tape, ssm, ent, rel, weights)?;
    let scaled = tape.scale(answer, answer_weight);
    let total = tape.add_scalars(&[base, scaled])?;
    let v = |tape: &Tape<'_>, x: Var| tape.value(x).item();
    let parts = LossParts {
        ssm: v(tape, ssm)?,
        ent: v(tape, ent)?,
        rel: v(tape, rel)?,
        answer: v(tape, answer)?,
        total: v(tape, total)?,
    };
    Ok((total, parts))
}
