//! Mention instrumentation: `[S-ENT] span [REL] [T-ENT]` around each mention.

use serde::{Deserialize, Serialize};

use super::vocab::{REL, S_ENT, T_ENT};
use crate::crw::EntityDistribution;
use crate::error::{OreoError, Result};
use crate::kg::SubgraphIndex;

/// Grounded mention over `[start, end)` of a raw token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub entity: usize,
}

/// Positions of one mention inside an instrumented sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionSlots {
    pub entity: usize,
    pub s_ent: usize,
    pub span: (usize, usize),
    pub rel: usize,
    pub t_ent: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentedSequence {
    pub tokens: Vec<usize>,
    pub mentions: Vec<MentionSlots>,
    /// Instrumented position of every raw token.
    pub positions: Vec<usize>,
    /// Position of the answer `[MASK]` for question items.
    pub answer: Option<usize>,
}

impl InstrumentedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn entities(&self) -> Vec<usize> {
        self.mentions.iter().map(|m| m.entity).collect()
    }

    pub fn s_ent_positions(&self) -> Vec<usize> {
        self.mentions.iter().map(|m| m.s_ent).collect()
    }

    pub fn rel_positions(&self) -> Vec<usize> {
        self.mentions.iter().map(|m| m.rel).collect()
    }

    pub fn t_ent_positions(&self) -> Vec<usize> {
        self.mentions.iter().map(|m| m.t_ent).collect()
    }
}

/// Inserts the three special tokens around every mention.
pub fn instrument(tokens: &[usize], mentions: &[Mention]) -> Result<InstrumentedSequence> {
    let mut sorted = mentions.to_vec();
    sorted.sort_by_key(|m| m.start);
    for m in &sorted {
        if m.start >= m.end || m.end > tokens.len() {
            return Err(OreoError::Input(format!(
                "mention span [{}, {}) invalid for {} tokens",
                m.start,
                m.end,
                tokens.len()
            )));
        }
    }
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(OreoError::Input(format!(
                "mentions [{}, {}) and [{}, {}) overlap",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
    }
    let mut out = Vec::with_capacity(tokens.len() + 3 * sorted.len());
    let mut slots = Vec::with_capacity(sorted.len());
    let mut positions = Vec::with_capacity(tokens.len());
    let mut cursor = 0;
    for m in &sorted {
        positions.extend(out.len()..out.len() + m.start - cursor);
        out.extend_from_slice(&tokens[cursor..m.start]);
        let s_ent = out.len();
        out.push(S_ENT);
        let span_start = out.len();
        positions.extend(span_start..span_start + m.end - m.start);
        out.extend_from_slice(&tokens[m.start..m.end]);
        let span = (span_start, out.len());
        let rel = out.len();
        out.push(REL);
        let t_ent = out.len();
        out.push(T_ENT);
        slots.push(MentionSlots {
            entity: m.entity,
            s_ent,
            span,
            rel,
            t_ent,
        });
        cursor = m.end;
    }
    positions.extend(out.len()..out.len() + tokens.len() - cursor);
    out.extend_from_slice(&tokens[cursor..]);
    Ok(InstrumentedSequence {
        tokens: out,
        mentions: slots,
        positions,
        answer: None,
    })
}

/// Inverse of [`instrument`].
pub fn deinstrument(seq: &InstrumentedSequence) -> (Vec<usize>, Vec<Mention>) {
    let mut tokens = Vec::with_capacity(seq.tokens.len());
    let mut mentions = Vec::with_capacity(seq.mentions.len());
    let mut cursor = 0;
    for m in &seq.mentions {
        tokens.extend_from_slice(&seq.tokens[cursor..m.s_ent]);
        let start = tokens.len();
        tokens.extend_from_slice(&seq.tokens[m.span.0..m.span.1]);
        mentions.push(Mention {
            start,
            end: tokens.len(),
            entity: m.entity,
        });
        cursor = m.t_ent + 1;
    }
    tokens.extend_from_slice(&seq.tokens[cursor..]);
    (tokens, mentions)
}

/// How the initial walker distribution of a mention is formed.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum InitMode {
    /// One-hot at the gold entity.
    #[default]
    Gold,
    /// Uniform over the listed candidates.
    Candidates(Vec<usize>),
}

/// Initial walker distribution for a mention of `entity`, aligned to `sub`.
pub fn init_pi(entity: usize, mode: &InitMode, sub: &SubgraphIndex) -> Result<EntityDistribution> {
    let local = |e: usize| {
        sub.local(e)
            .ok_or_else(|| OreoError::Linking(format!("entity {e} is not in the subgraph")))
    };
    match mode {
        InitMode::Gold => EntityDistribution::one_hot(sub.len(), local(entity)?),
        InitMode::Candidates(c) => {
            let mut c = c.clone();
            c.sort_unstable();
            c.dedup();
            if c.is_empty() {
                return Err(OreoError::Linking("empty candidate set".into()));
            }
            let mut probs = vec![0.0; sub.len()];
            let share = 1.0 / c.len() as f64;
            for e in c {
                probs[local(e)?] = share;
            }
            EntityDistribution::new(probs)
        }
    }
}
