//! Hits@1 over question sets, overall and bucketed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::data::{question_sequence, GraphContext};
use crate::error::Result;
use crate::kg::k_hop_subgraph;
use crate::model::{ForwardInput, Model, Vocab};
use crate::numerics::argmax;
use crate::synth::QaItem;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub correct: usize,
    pub count: usize,
    pub hits1: f64,
}

impl Bucket {
    fn add(&mut self, hit: bool) {
        self.count += 1;
        self.correct += hit as usize;
        self.hits1 = self.correct as f64 / self.count as f64;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QaMetrics {
    pub overall: Bucket,
    pub by_hops: BTreeMap<usize, Bucket>,
    pub by_relation: BTreeMap<String, Bucket>,
}

impl QaMetrics {
    pub fn hits1(&self) -> f64 {
        self.overall.hits1
    }

    pub fn hops(&self, h: usize) -> Option<f64> {
        self.by_hops.get(&h).map(|b| b.hits1)
    }

    pub fn relation(&self, r: &str) -> Option<f64> {
        self.by_relation.get(r).map(|b| b.hits1)
    }
}

/// Scores every item with `score` (one value per entity) and counts top-1 hits.
pub fn evaluate_with<F>(items: &[QaItem], mut score: F) -> Result<QaMetrics>
where
    F: FnMut(&QaItem) -> Result<Vec<f64>>,
{
    let mut m = QaMetrics::default();
    for item in items {
        let s = score(item)?;
        let hit = argmax(&s) == Some(item.answer);
        m.overall.add(hit);
        m.by_hops.entry(item.hops).or_default().add(hit);
        m.by_relation.entry(item.relation.clone()).or_default().add(hit);
    }
    Ok(m)
}

/// Hits@1 of `model`, scoring the answer `[MASK]` over all entities.
pub fn evaluate_qa(model: &Model, items: &[QaItem], ctx: &GraphContext, vocab: &Vocab) -> Result<QaMetrics> {
    let hops = model.config().hops;
    evaluate_with(items, |item| {
        let seq = question_sequence(item, vocab)?;
        let sub = k_hop_subgraph(&seq.entities(), hops, &ctx.kg);
        let (scores, _) = model.predict_answer(ForwardInput {
            seq: &seq,
            sub: &sub,
            wdeg: &ctx.wdeg,
        })?;
        Ok(scores)
    })
}
