//! Transformer encoder with interleaved Knowledge Interaction Layers.
//!
//! The forward pass embeds an instrumented sequence and runs the encoder
//! blocks in order. After every `spacing` blocks (for the first `depth`
//! groups) one interaction step runs: relation prediction at the `[REL]`
//! tokens, one walk transition, and injection at the `[T-ENT]` tokens. With
//! `depth = 0` the loop body never executes and the pass is the plain encoder.

mod encoder;
mod instrument;
mod trace;
mod vocab;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crw::{transition_on_tape, DegreeWeights, EntityDistribution, RelationDistribution};
use crate::error::{OreoError, Result};
use crate::kg::SubgraphIndex;
use crate::kil::{entity_logits, inject_on_tape, relation_logits, KgMemories, KilParams};
use crate::numerics::{Checkpoint, ParamSet, Tape, Tensor, Var};

pub use encoder::{Encoder, EncoderLayer};
pub use instrument::{deinstrument, init_pi, instrument, InitMode, InstrumentedSequence, Mention, MentionSlots};
pub use trace::{MentionTrace, ReasoningTrace, TraceRecord, TraceStep};
pub use vocab::{Vocab, MASK, PAD, REL, SPECIAL_TOKENS, S_ENT, T_ENT, VOCAB_FILE};

fn default_max_len() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder blocks `L`.
    pub layers: usize,
    /// Reasoning depth `T`.
    pub depth: usize,
    /// Blocks between interaction layers `N`.
    pub spacing: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Filled from the vocabulary when left at 0.
    #[serde(default)]
    pub vocab_size: usize,
    pub d_entity: usize,
    /// Subgraph hop count `K`.
    pub hops: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            depth: 2,
            spacing: 1,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            vocab_size: 0,
            d_entity: 32,
            hops: 2,
            max_len: default_max_len(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OreoError::Config(m));
        if self.spacing == 0 {
            return bad("spacing must be at least 1".into());
        }
        if self.depth * self.spacing > self.layers {
            return bad(format!(
                "depth {} x spacing {} exceeds {} layers",
                self.depth, self.spacing, self.layers
            ));
        }
        if self.hops < self.depth {
            return bad(format!("hops {} below depth {}", self.hops, self.depth));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} not divisible into {} heads",
                self.d_model, self.heads
            ));
        }
        if self.d_ff == 0 || self.d_entity == 0 || self.max_len == 0 {
            return bad("widths and max_len must be positive".into());
        }
        if self.vocab_size <= SPECIAL_TOKENS.len() {
            return bad(format!("vocab_size {} leaves no ordinary tokens", self.vocab_size));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Everything the forward pass needs besides the weights.
#[derive(Clone, Copy, Debug)]
pub struct ForwardInput<'a> {
    pub seq: &'a InstrumentedSequence,
    pub sub: &'a SubgraphIndex,
    pub wdeg: &'a DegreeWeights,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Final normalized hidden states `[n, d]`.
    pub hidden: Var,
    /// `[S-ENT]` hidden states after the first `spacing` blocks, `[m, d]`.
    pub s_ent_hidden: Option<Var>,
    /// `V_ent[I]`.
    pub v_local: Option<Var>,
    /// Per step relation logits `[m, |R|]`.
    pub rel_logits: Vec<Var>,
    pub gammas: Vec<Var>,
    /// `π⁰ … π^T`, each `[m, |I|]`.
    pub pis: Vec<Var>,
}

/// Plain values from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `(position, vocabulary logits)` for every `[MASK]` position.
    pub mask_logits: Vec<(usize, Vec<f64>)>,
    /// Entity distribution over the subgraph at the answer position.
    pub answer_scores: Option<Vec<f64>>,
    pub trace: ReasoningTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    num_entities: usize,
    num_relations: usize,
    params: ParamSet,
    encoder: Encoder,
    kil: KilParams,
    mem: KgMemories,
}

impl Model {
    /// Fresh weights, deterministic in `seed`.
    pub fn new(config: ModelConfig, num_entities: usize, num_relations: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_entities == 0 || num_relations == 0 {
            return Err(OreoError::Config("knowledge graph has no entities or relations".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::register(&mut params, &config, &mut rng)?;
        let mem = KgMemories::register(
            &mut params,
            num_relations,
            num_entities,
            config.d_model,
            config.d_entity,
            &mut rng,
        )?;
        let kil = KilParams::register(&mut params, config.depth, config.d_model, config.d_entity, &mut rng)?;
        Ok(Model {
            config,
            num_entities,
            num_relations,
            params,
            encoder,
            kil,
            mem,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn kil(&self) -> &KilParams {
        &self.kil
    }

    pub fn memories(&self) -> &KgMemories {
        &self.mem
    }

    /// Checkpoint with the model description under `meta.model`.
    pub fn to_checkpoint(&self, mut meta: serde_json::Value) -> Result<Checkpoint> {
        if !meta.is_object() {
            meta = serde_json::json!({});
        }
        meta["model"] = serde_json::json!({
            "config": self.config,
            "num_entities": self.num_entities,
            "num_relations": self.num_relations,
        });
        Ok(Checkpoint::new(self.params.clone(), meta))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let bad = |m: &str| OreoError::Checkpoint(m.to_string());
        let desc = ckpt.meta.get("model").ok_or_else(|| bad("no model description"))?;
        let config: ModelConfig = serde_json::from_value(desc["config"].clone())?;
        let n_ent = desc["num_entities"].as_u64().ok_or_else(|| bad("num_entities"))? as usize;
        let n_rel = desc["num_relations"].as_u64().ok_or_else(|| bad("num_relations"))? as usize;
        let mut model = Model::new(config, n_ent, n_rel, 0)?;
        if ckpt.params.len() != model.params.len() {
            return Err(bad("parameter count does not match the configuration"));
        }
        for (p, q) in model.params.iter_mut().zip(ckpt.params.iter()) {
            if p.name != q.name || p.value.shape() != q.value.shape() {
                return Err(OreoError::Checkpoint(format!(
                    "expected {} {:?}, found {} {:?}",
                    p.name,
                    p.value.shape(),
                    q.name,
                    q.value.shape()
                )));
            }
            p.value = q.value.clone();
        }
        Ok(model)
    }

    /// Records the forward pass on `tape`, which must read this model's parameter layout.
    pub fn forward_tape(&self, tape: &mut Tape<'_>, input: ForwardInput<'_>) -> Result<ForwardVars> {
        let ForwardInput { seq, sub, wdeg } = input;
        let cfg = &self.config;
        let m = seq.mentions.len();
        let mut x = self.encoder.embed(tape, &seq.tokens)?;
        let mut vars = ForwardVars {
            hidden: x,
            s_ent_hidden: None,
            v_local: None,
            rel_logits: Vec::new(),
            gammas: Vec::new(),
            pis: Vec::new(),
        };
        let walk = m > 0 && cfg.depth > 0;
        let mut weights = None;
        let mut wdeg_local = Vec::new();
        let mut k_rel = None;
        if m > 0 {
            let v = tape.param(self.mem.v_ent);
            vars.v_local = Some(tape.gather_rows(v, &sub.entities)?);
            let mut rows = Vec::with_capacity(m * sub.len());
            for slot in &seq.mentions {
                rows.extend_from_slice(init_pi(slot.entity, &InitMode::Gold, sub)?.probs());
            }
            vars.pis.push(tape.constant(Tensor::matrix(m, sub.len(), rows)?));
        }
        if walk {
            let w = tape.param(self.mem.w_rel_log);
            weights = Some(tape.exp(w)?);
            wdeg_local = wdeg.local(sub);
            k_rel = Some(tape.param(self.mem.k_rel));
        }
        for l in 0..cfg.layers {
            x = self.encoder.layer(tape, l, x)?;
            let done = l + 1;
            if done == cfg.spacing && m > 0 {
                vars.s_ent_hidden = Some(tape.gather_rows(x, &seq.s_ent_positions())?);
            }
            if walk && done % cfg.spacing == 0 && done / cfg.spacing <= cfg.depth {
                let step = self.kil.step(done / cfg.spacing)?;
                let h_rel = tape.gather_rows(x, &seq.rel_positions())?;
                let logits = relation_logits(tape, step, k_rel.expect("walk"), h_rel)?;
                let gamma = tape.softmax_rows(logits)?;
                let prev = *vars.pis.last().expect("π⁰");
                let pi = transition_on_tape(tape, prev, gamma, weights.expect("walk"), sub, &wdeg_local)?;
                let t_pos = seq.t_ent_positions();
                let h_tent = tape.gather_rows(x, &t_pos)?;
                let injected = inject_on_tape(tape, step, pi, vars.v_local.expect("walk"), h_tent)?;
                x = tape.set_rows(x, &t_pos, injected)?;
                vars.rel_logits.push(logits);
                vars.gammas.push(gamma);
                vars.pis.push(pi);
            }
        }
        vars.hidden = self.encoder.finish(tape, x)?;
        Ok(vars)
    }

    /// Entity logits at a hidden row, over `V_ent[I]` or over every entity.
    pub fn answer_logits(
        &self,
        tape: &mut Tape<'_>,
        vars: &ForwardVars,
        position: usize,
        over: AnswerScope<'_>,
    ) -> Result<Var> {
        let h = tape.gather_rows(vars.hidden, &[position])?;
        let rows = match over {
            AnswerScope::Subgraph(sub) => match vars.v_local {
                Some(v) => v,
                None => {
                    let v = tape.param(self.mem.v_ent);
                    tape.gather_rows(v, &sub.entities)?
                }
            },
            AnswerScope::All => tape.param(self.mem.v_ent),
        };
        entity_logits(tape, &self.kil.entity_head, rows, h)
    }

    /// Entity logits for every `[S-ENT]` row, `[m, |I|]`.
    pub fn mention_entity_logits(&self, tape: &mut Tape<'_>, vars: &ForwardVars) -> Result<Option<Var>> {
        match (vars.s_ent_hidden, vars.v_local) {
            (Some(h), Some(v)) => Ok(Some(entity_logits(tape, &self.kil.entity_head, v, h)?)),
            _ => Ok(None),
        }
    }

    /// Plain-value forward pass with the full reasoning trace.
    pub fn forward(&self, input: ForwardInput<'_>) -> Result<ForwardOutput> {
        let mut tape = Tape::new(&self.params);
        let vars = self.forward_tape(&mut tape, input)?;
        let seq = input.seq;
        let mask_pos: Vec<usize> = (0..seq.len()).filter(|&i| seq.tokens[i] == MASK).collect();
        let mut mask_logits = Vec::with_capacity(mask_pos.len());
        if !mask_pos.is_empty() {
            let logits = self.encoder.token_logits(&mut tape, vars.hidden, &mask_pos)?;
            let t = tape.value(logits);
            for (r, &p) in mask_pos.iter().enumerate() {
                mask_logits.push((p, t.row(r).to_vec()));
            }
        }
        let answer_scores = match seq.answer {
            Some(pos) if !input.sub.is_empty() => {
                let l = self.answer_logits(&mut tape, &vars, pos, AnswerScope::Subgraph(input.sub))?;
                let p = tape.softmax_rows(l)?;
                Some(tape.value(p).data().to_vec())
            }
            _ => None,
        };
        let trace = self.collect_trace(&tape, &vars, input)?;
        Ok(ForwardOutput {
            mask_logits,
            answer_scores,
            trace,
        })
    }

    /// Distribution over all entities at the answer position, with the trace.
    pub fn predict_answer(&self, input: ForwardInput<'_>) -> Result<(Vec<f64>, ReasoningTrace)> {
        let pos = input
            .seq
            .answer
            .ok_or_else(|| OreoError::Input("sequence has no answer position".into()))?;
        let mut tape = Tape::new(&self.params);
        let vars = self.forward_tape(&mut tape, input)?;
        let l = self.answer_logits(&mut tape, &vars, pos, AnswerScope::All)?;
        let p = tape.softmax_rows(l)?;
        let scores = tape.value(p).data().to_vec();
        Ok((scores, self.collect_trace(&tape, &vars, input)?))
    }

    fn collect_trace(&self, tape: &Tape<'_>, vars: &ForwardVars, input: ForwardInput<'_>) -> Result<ReasoningTrace> {
        let mut trace = ReasoningTrace {
            entities: input.sub.entities.clone(),
            mentions: Vec::new(),
        };
        if vars.pis.is_empty() {
            return Ok(trace);
        }
        for (i, slot) in input.seq.mentions.iter().enumerate() {
            let mut steps = Vec::with_capacity(vars.gammas.len());
            for (g, p) in vars.gammas.iter().zip(&vars.pis[1..]) {
                steps.push(TraceStep {
                    gamma: RelationDistribution::new(tape.value(*g).row(i).to_vec())?,
                    pi: EntityDistribution::new(tape.value(*p).row(i).to_vec())?,
                });
            }
            trace.mentions.push(MentionTrace {
                entity: slot.entity,
                pi0: EntityDistribution::new(tape.value(vars.pis[0]).row(i).to_vec())?,
                steps,
            });
        }
        Ok(trace)
    }
}

/// Candidate set for answer scoring.
#[derive(Clone, Copy, Debug)]
pub enum AnswerScope<'a> {
    Subgraph(&'a SubgraphIndex),
    All,
}
