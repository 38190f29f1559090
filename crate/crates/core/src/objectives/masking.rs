//! Salient-span masking.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OreoError, Result};
use crate::model::{instrument, InstrumentedSequence, Mention, MASK};

/// Raw grounded passage: token ids plus mention spans.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub tokens: Vec<usize>,
    pub mentions: Vec<Mention>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub max_masked_entities: usize,
    pub num_spans: usize,
    /// Inclusive range of span lengths.
    pub min_span: usize,
    pub max_span: usize,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            max_masked_entities: 2,
            num_spans: 1,
            min_span: 1,
            max_span: 5,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.min_span == 0 || self.min_span > self.max_span {
            return Err(OreoError::Config(format!(
                "span lengths {}..={} invalid",
                self.min_span, self.max_span
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedPassage {
    /// Instrumented tokens with `[MASK]` substitutions; only surviving mentions are instrumented.
    pub seq: InstrumentedSequence,
    /// `(instrumented position, original token)` for every masked token.
    pub targets: Vec<(usize, usize)>,
    /// Entity ids whose mentions were all masked.
    pub masked_entities: Vec<usize>,
    /// Mentions left intact, in raw coordinates.
    pub context: Vec<Mention>,
}

impl MaskedPassage {
    pub fn context_entities(&self) -> Vec<usize> {
        self.context.iter().map(|m| m.entity).collect()
    }
}

/// Masks up to `max_masked_entities` entities (every mention of each) and
/// `num_spans` random spans. Mentions touched by a span are masked whole and
/// lose their instrumentation, but their entity is not a masking target.
pub fn mask_passage(passage: &Passage, policy: &MaskingPolicy, rng: &mut impl Rng) -> Result<MaskedPassage> {
    policy.validate()?;
    let n = passage.tokens.len();
    let mut masked = vec![false; n];
    let entities: Vec<usize> = passage
        .mentions
        .iter()
        .map(|m| m.entity)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut chosen: Vec<usize> = entities
        .choose_multiple(rng, policy.max_masked_entities.min(entities.len()))
        .copied()
        .collect();
    chosen.sort_unstable();
    for m in &passage.mentions {
        if chosen.binary_search(&m.entity).is_ok() {
            masked[m.start..m.end].iter_mut().for_each(|x| *x = true);
        }
    }
    if n > 0 {
        for _ in 0..policy.num_spans {
            let len = rng.gen_range(policy.min_span..=policy.max_span).min(n);
            let start = rng.gen_range(0..=n - len);
            masked[start..start + len].iter_mut().for_each(|x| *x = true);
        }
    }
    let mut context = Vec::new();
    for m in &passage.mentions {
        if masked[m.start..m.end].iter().any(|x| *x) {
            masked[m.start..m.end].iter_mut().for_each(|x| *x = true);
        } else {
            context.push(*m);
        }
    }
    let raw: Vec<usize> = passage
        .tokens
        .iter()
        .zip(&masked)
        .map(|(&t, &m)| if m { MASK } else { t })
        .collect();
    let seq = instrument(&raw, &context)?;
    let targets = (0..n)
        .filter(|&i| masked[i])
        .map(|i| (seq.positions[i], passage.tokens[i]))
        .collect();
    Ok(MaskedPassage {
        seq,
        targets,
        masked_entities: chosen,
        context,
    })
}
