//! Pretraining objectives: salient-span masking, entity linking, and the
//! weakly supervised relation-path loss.
//!
//! The loss functions record onto a tape so their gradients reach every
//! parameter; each returns a scalar node.

mod dependency;
mod masking;

use serde::{Deserialize, Serialize};

use crate::error::{OreoError, Result};
use crate::numerics::{Tape, Tensor, Var};

pub use dependency::{build_dependency_graph, GroundedDependencyGraph};
pub use masking::{mask_passage, MaskedPassage, MaskingPolicy, Passage};

/// Weights of the auxiliary losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ent: f64,
    pub rel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ent: 1.0, rel: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.ent >= 0.0 && self.rel >= 0.0) {
            return Err(OreoError::Config(format!(
                "loss weights must be nonnegative, got ent={} rel={}",
                self.ent, self.rel
            )));
        }
        Ok(())
    }
}

fn one_hot_rows(targets: &[usize], width: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[targets.len(), width]);
    for (r, &c) in targets.iter().enumerate() {
        if c >= width {
            return Err(OreoError::Index {
                index: c,
                extent: width,
            });
        }
        t.row_mut(r)[c] = 1.0;
    }
    Ok(t)
}

fn check_label(q: &[f64]) -> Result<()> {
    let total: f64 = q.iter().sum();
    if q.iter().any(|x| !(*x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(OreoError::Input(format!("label vector sums to {total}")));
    }
    Ok(())
}

/// Mean token cross-entropy over masked positions; `logits` is `[k, V]`.
pub fn loss_ssm(tape: &mut Tape<'_>, logits: Option<Var>, targets: &[usize]) -> Result<Var> {
    let Some(logits) = logits else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    if targets.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let width = tape.value(logits).cols();
    let ce = tape.softmax_cross_entropy(logits, one_hot_rows(targets, width)?)?;
    let s = tape.sum(ce);
    Ok(tape.scale(s, 1.0 / targets.len() as f64))
}

/// `Σ_i −⟨log softmax(logits_i), π⁰_i⟩`; `logits` is `[m, |I|]`.
pub fn loss_ent(tape: &mut Tape<'_>, logits: Option<Var>, pi0: &Tensor) -> Result<Var> {
    match logits {
        Some(l) if pi0.rows() > 0 => {
            for r in 0..pi0.rows() {
                check_label(pi0.row(r))?;
            }
            let ce = tape.softmax_cross_entropy(l, pi0.clone())?;
            Ok(tape.sum(ce))
        }
        _ => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// `Σ_i Σ_t −⟨log γ_i^t, q_i^t⟩` over defined labels.
///
/// `rel_logits[t]` is `[m, |R|]`; `labels[i][t]` is `None` for an empty set.
pub fn loss_rel(tape: &mut Tape<'_>, rel_logits: &[Var], labels: &[Vec<Option<Vec<f64>>>]) -> Result<Var> {
    let mut parts = Vec::new();
    for (t, &logits) in rel_logits.iter().enumerate() {
        let width = tape.value(logits).cols();
        let mut rows = Vec::new();
        let mut q = Vec::new();
        for (i, per_step) in labels.iter().enumerate() {
            if let Some(Some(label)) = per_step.get(t) {
                check_label(label)?;
                if label.len() != width {
                    return Err(OreoError::shape(format!(
                        "label over {} relations, logits over {width}",
                        label.len()
                    )));
                }
                rows.push(i);
                q.push(label.clone());
            }
        }
        if rows.is_empty() {
            continue;
        }
        let picked = tape.gather_rows(logits, &rows)?;
        let ce = tape.softmax_cross_entropy(picked, Tensor::from_rows(&q)?)?;
        parts.push(tape.sum(ce));
    }
    if parts.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    tape.add_scalars(&parts)
}

/// `l_ssm + λ_ent l_ent + λ_rel l_rel` on the tape.
pub fn total_loss_on_tape(tape: &mut Tape<'_>, ssm: Var, ent: Var, rel: Var, w: LossWeights) -> Result<Var> {
    let ent = tape.scale(ent, w.ent);
    let rel = tape.scale(rel, w.rel);
    tape.add_scalars(&[ssm, ent, rel])
}

pub fn total_loss(ssm: f64, ent: f64, rel: f64, w: LossWeights) -> f64 {
    ssm + w.ent * ent + w.rel * rel
}
