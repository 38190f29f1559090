//! Pre-norm transformer encoder with learned absolute positions.

use rand::Rng;

use super::ModelConfig;
use crate::error::{OreoError, Result};
use crate::layers::{normal_tensor, Linear, Norm};
use crate::numerics::{ParamId, ParamSet, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayer {
    pub ln_attn: Norm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln_ff: Norm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoder {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Norm,
    pub lm_head: Linear,
    heads: usize,
    max_len: usize,
}

impl Encoder {
    pub fn register(ps: &mut ParamSet, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        let tok_emb = ps.insert("tok_emb", normal_tensor(&[cfg.vocab_size, d], 1.0, rng))?;
        let pos_emb = ps.insert("pos_emb", normal_tensor(&[cfg.max_len, d], 0.1, rng))?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("layer{l}");
            layers.push(EncoderLayer {
                ln_attn: Norm::register(ps, &format!("{p}.ln_attn"), d)?,
                wq: Linear::register(ps, &format!("{p}.wq"), d, d, rng)?,
                wk: Linear::register(ps, &format!("{p}.wk"), d, d, rng)?,
                wv: Linear::register(ps, &format!("{p}.wv"), d, d, rng)?,
                wo: Linear::register(ps, &format!("{p}.wo"), d, d, rng)?,
                ln_ff: Norm::register(ps, &format!("{p}.ln_ff"), d)?,
                ff_in: Linear::register(ps, &format!("{p}.ff_in"), d, cfg.d_ff, rng)?,
                ff_out: Linear::register(ps, &format!("{p}.ff_out"), cfg.d_ff, d, rng)?,
            });
        }
        Ok(Encoder {
            tok_emb,
            pos_emb,
            layers,
            final_norm: Norm::register(ps, "final_norm", d)?,
            lm_head: Linear::register(ps, "lm_head", d, cfg.vocab_size, rng)?,
            heads: cfg.heads,
            max_len: cfg.max_len,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Token plus position embeddings, `[n, d]`.
    pub fn embed(&self, tape: &mut Tape<'_>, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(OreoError::Input("empty token sequence".into()));
        }
        if tokens.len() > self.max_len {
            return Err(OreoError::Input(format!(
                "sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                self.max_len
            )));
        }
        let tok = tape.param(self.tok_emb);
        let tok = tape.gather_rows(tok, tokens)?;
        let pos = tape.param(self.pos_emb);
        let idx: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather_rows(pos, &idx)?;
        tape.add(tok, pos)
    }

    /// Applies encoder block `l` to `x`.
    pub fn layer(&self, tape: &mut Tape<'_>, l: usize, x: Var) -> Result<Var> {
        let b = &self.layers[l];
        let h = b.ln_attn.apply(tape, x)?;
        let q = b.wq.apply(tape, h)?;
        let k = b.wk.apply(tape, h)?;
        let v = b.wv.apply(tape, h)?;
        let d = tape.value(q).cols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s)?;
            ctx.push(tape.matmul(a, vh)?);
        }
        let ctx = tape.concat_cols(&ctx)?;
        let attn = b.wo.apply(tape, ctx)?;
        let x = tape.add(x, attn)?;
        let h = b.ln_ff.apply(tape, x)?;
        let h = b.ff_in.apply(tape, h)?;
        let h = tape.gelu(h);
        let h = b.ff_out.apply(tape, h)?;
        tape.add(x, h)
    }

    pub fn finish(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        self.final_norm.apply(tape, x)
    }

    /// Plain encoder: embeddings, every block, final norm.
    pub fn forward(&self, tape: &mut Tape<'_>, tokens: &[usize]) -> Result<Var> {
        let mut x = self.embed(tape, tokens)?;
        for l in 0..self.layers.len() {
            x = self.layer(tape, l, x)?;
        }
        self.finish(tape, x)
    }

    /// Vocabulary logits at `positions` of a final hidden state.
    pub fn token_logits(&self, tape: &mut Tape<'_>, hidden: Var, positions: &[usize]) -> Result<Var> {
        let rows = tape.gather_rows(hidden, positions)?;
        self.lm_head.apply(tape, rows)
    }
}
