//! Parameter bundles shared by the encoder and the interaction layers.
//!
//! Each bundle only stores [`ParamId`]s; the weights live in a [`ParamSet`]
//! and are read through a [`Tape`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::{ParamId, ParamSet, Tape, Tensor, Var};

/// Tensor with i.i.d. `N(0, std²)` entries.
pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = dist.sample(rng);
    }
    t
}

/// Affine map `x · W + b` over rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weights drawn with standard deviation `1/sqrt(fan_in)`, zero bias.
    pub fn register(
        ps: &mut ParamSet,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = ps.insert(format!("{prefix}.w"), normal_tensor(&[fan_in, fan_out], std, rng))?;
        let b = ps.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Linear { w, b })
    }

    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Layer normalization with its own gain and bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn register(ps: &mut ParamSet, prefix: &str, width: usize) -> Result<Self> {
        let gain = ps.insert(format!("{prefix}.gain"), Tensor::filled(&[width], 1.0))?;
        let bias = ps.insert(format!("{prefix}.bias"), Tensor::zeros(&[width]))?;
        Ok(Norm { gain, bias })
    }

    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Two-layer projection `W2 relu(W1 x + b1) + b2`; the hidden width equals the output width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub inner: Linear,
    pub outer: Linear,
}

impl Mlp {
    pub fn register(
        ps: &mut ParamSet,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            inner: Linear::register(ps, &format!("{prefix}.inner"), fan_in, fan_out, rng)?,
            outer: Linear::register(ps, &format!("{prefix}.outer"), fan_out, fan_out, rng)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.inner.apply(tape, x)?;
        let h = tape.relu(h);
        self.outer.apply(tape, h)
    }
}
