//! Training, evaluation, rule extraction and gradient checks.
//!
//! Every example gets its own tape; per-example gradients are summed in batch
//! order, so a run is a pure function of config, data and seed.

mod data;
mod eval;
mod rules;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OreoError, Result};
use crate::kil::W_REL_LOG;
use crate::model::{Model, ModelConfig};
use crate::numerics::{check_gradients, Checkpoint, GradCheckOptions, GradCheckReport, Tape};
use crate::objectives::{LossWeights, MaskingPolicy, Passage};
use crate::synth::Dataset;

pub use data::{
    example_loss, passage_example, question_example, question_sequence, Example, GraphContext, LossParts, Origin,
};
pub use eval::{evaluate_qa, evaluate_with, Bucket, QaMetrics};
pub use rules::{average_gammas, extract_rules, rank_path, PathReport, RelationScore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default)]
    pub loss: LossWeights,
    /// Weight of the entity-head loss at question answers and masked passage entities.
    pub answer_weight: f64,
    /// Share of batch slots filled with training questions.
    pub qa_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub masking: MaskingPolicy,
    /// Keep relation importance weights at their initial value.
    #[serde(default)]
    pub freeze_w_rel: bool,
    #[serde(default = "default_true")]
    pub inverse_closure: bool,
    pub log_every: usize,
    /// Data directory; relative paths resolve against the config file.
    #[serde(default)]
    pub data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            batch_size: 24,
            steps: 3000,
            loss: LossWeights::default(),
            answer_weight: 1.0,
            qa_fraction: 0.5,
            seed: 0,
            masking: MaskingPolicy::default(),
            freeze_w_rel: false,
            inverse_closure: true,
            log_every: 100,
            data: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        let ok = o.lr > 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.eps > 0.0
            && self.batch_size > 0
            && self.log_every > 0
            && self.answer_weight >= 0.0
            && (0.0..=1.0).contains(&self.qa_fraction);
        if !ok {
            return Err(OreoError::Config(
                "optimizer, batch or mixing settings out of range".into(),
            ));
        }
        self.loss.validate()?;
        self.masking.validate()?;
        if self.model.vocab_size != 0 {
            self.model.validate()?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Loads a config and resolves `data` relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let Some(d) = &c.data {
            if d.is_relative() {
                c.data = Some(path.parent().unwrap_or(Path::new(".")).join(d));
            }
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Adaptive-moment optimizer over every parameter of a set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Adam { cfg, t: 0, m, v }
    }

    /// One update; `frozen[i]` skips parameter `i` (its moments stay put).
    pub fn step(&mut self, values: &mut [&mut [f64]], grads: &[Vec<f64>], frozen: &[bool]) {
        self.t += 1;
        let c = self.cfg;
        let b1t = 1.0 - c.beta1.powi(self.t as i32);
        let b2t = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in values.iter_mut().enumerate() {
            if frozen[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mh = m[j] / b1t;
                let vh = v[j] / b2t;
                *x -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

/// Mean losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: LossParts,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub model: Model,
    /// One record per step, in order.
    pub history: Vec<LossRecord>,
}

impl TrainRun {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "train": self.config,
            "final_loss": self.history.last().map(|r| r.loss.total),
        });
        self.model.to_checkpoint(meta)
    }
}

/// Settings a checkpoint carries for evaluation.
pub fn checkpoint_inverse_closure(ckpt: &Checkpoint) -> bool {
    ckpt.meta
        .pointer("/train/inverse_closure")
        .and_then(|v| v.as_bool())
        .unwrap_or(true)
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    step: usize,
    origin: Origin,
    tokens: &'a [usize],
    entities: Vec<usize>,
    targets: &'a [(usize, usize)],
    loss: LossParts,
}

pub(crate) fn encode_passages(data: &Dataset) -> Result<Vec<Passage>> {
    data.passages.iter().map(|p| p.encode(&data.vocab)).collect()
}

/// Model shaped for `data` under `config`.
pub fn init_model(config: &TrainConfig, data: &Dataset, ctx: &GraphContext) -> Result<Model> {
    let mut mc = config.model.clone();
    if mc.vocab_size == 0 {
        mc.vocab_size = data.vocab.len();
    } else if mc.vocab_size < data.vocab.len() {
        return Err(OreoError::Config(format!(
            "vocab_size {} below the data vocabulary {}",
            mc.vocab_size,
            data.vocab.len()
        )));
    }
    Model::new(mc, ctx.kg.num_entities(), ctx.kg.num_relations(), config.seed)
}

/// Trains from scratch; `on_log` sees every `log_every`-th record.
pub fn train_with(config: &TrainConfig, data: &Dataset, mut on_log: impl FnMut(&LossRecord)) -> Result<TrainRun> {
    config.validate()?;
    let ctx = GraphContext::new(&data.kg, config.inverse_closure)?;
    let mut model = init_model(config, data, &ctx)?;
    let passages = encode_passages(data)?;
    let mc = model.config().clone();
    let questions = data
        .qa_train
        .iter()
        .enumerate()
        .map(|(i, q)| question_example(q, i, &data.vocab, &ctx, mc.depth, mc.hops))
        .collect::<Result<Vec<_>>>()?;
    if passages.is_empty() && questions.is_empty() {
        return Err(OreoError::Input("no training data".into()));
    }
    let frozen: Vec<bool> = model
        .params()
        .iter()
        .map(|p| config.freeze_w_rel && p.name == W_REL_LOG)
        .collect();
    let mut adam = Adam::new(config.optimizer, model.params().iter().map(|p| p.value.len()));
    // stream separate from the initializer so masking doesn't track weights
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut history = Vec::with_capacity(config.steps);
    let scale = 1.0 / config.batch_size as f64;
    for step in 1..=config.steps {
        let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        let mut mean = LossParts::default();
        for _ in 0..config.batch_size {
            let use_qa = !questions.is_empty() && (passages.is_empty() || rng.gen_bool(config.qa_fraction));
            let fresh;
            let ex = if use_qa {
                &questions[rng.gen_range(0..questions.len())]
            } else {
                let i = rng.gen_range(0..passages.len());
                fresh = passage_example(&passages[i], i, &config.masking, &ctx, mc.depth, mc.hops, &mut rng)?;
                &fresh
            };
            let mut tape = Tape::new(model.params());
            let (loss, parts) = example_loss(&model, &mut tape, ex, &ctx, config.loss, config.answer_weight)?;
            if !parts.total.is_finite() {
                let diag = Diagnostic {
                    step,
                    origin: ex.origin,
                    tokens: &ex.seq.tokens,
                    entities: ex.seq.entities(),
                    targets: &ex.targets,
                    loss: parts,
                };
                return Err(OreoError::Numerical(format!(
                    "non-finite loss; offending example: {}",
                    serde_json::to_string(&diag)?
                )));
            }
            mean.add_scaled(&parts, scale);
            let g = tape.backward(loss)?;
            for (id, t) in g.iter() {
                for (a, b) in grads[id.0].iter_mut().zip(t.data()) {
                    *a += scale * b;
                }
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(OreoError::Numerical(format!("non-finite gradient at step {step}")));
        }
        {
            let mut values: Vec<&mut [f64]> = model.params_mut().iter_mut().map(|p| p.value.data_mut()).collect();
            adam.step(&mut values, &grads, &frozen);
        }
        let rec = LossRecord { step, loss: mean };
        if step % config.log_every == 0 || step == config.steps {
            on_log(&rec);
        }
        history.push(rec);
    }
    Ok(TrainRun {
        config: config.clone(),
        model,
        history,
    })
}

pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainRun> {
    train_with(config, data, |_| {})
}

/// Which auxiliary losses an ablation switches off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Drop {
    Ent,
    Rel,
    Both,
}

impl Drop {
    pub fn apply(self, w: LossWeights) -> LossWeights {
        match self {
            Drop::Ent => LossWeights { ent: 0.0, ..w },
            Drop::Rel => LossWeights { rel: 0.0, ..w },
            Drop::Both => LossWeights { ent: 0.0, rel: 0.0 },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub drop: Drop,
    pub seed: u64,
    pub full: QaMetrics,
    pub ablated: QaMetrics,
}

/// Trains the full and the ablated objective under one seed and compares
/// held-out Hits@1.
pub fn ablate(config: &TrainConfig, data: &Dataset, drop: Drop) -> Result<AblationReport> {
    let ctx = GraphContext::new(&data.kg, config.inverse_closure)?;
    let full = train(config, data)?;
    let mut cut = config.clone();
    cut.loss = drop.apply(config.loss);
    let ablated = train(&cut, data)?;
    Ok(AblationReport {
        drop,
        seed: config.seed,
        full: evaluate_qa(&full.model, &data.qa_heldout, &ctx, &data.vocab)?,
        ablated: evaluate_qa(&ablated.model, &data.qa_heldout, &ctx, &data.vocab)?,
    })
}

/// A small deterministic batch: `passages` masked passages and `questions` questions.
pub fn probe_batch(
    model: &Model,
    data: &Dataset,
    ctx: &GraphContext,
    passages: usize,
    questions: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoded = encode_passages(data)?;
    let (depth, hops) = (model.config().depth, model.config().hops);
    let mut out = Vec::new();
    for _ in 0..passages.min(encoded.len()) {
        let i = rng.gen_range(0..encoded.len());
        out.push(passage_example(
            &encoded[i],
            i,
            &MaskingPolicy::default(),
            ctx,
            depth,
            hops,
            &mut rng,
        )?);
    }
    for _ in 0..questions.min(data.qa_train.len()) {
        let i = rng.gen_range(0..data.qa_train.len());
        out.push(question_example(&data.qa_train[i], i, &data.vocab, ctx, depth, hops)?);
    }
    Ok(out)
}

/// Finite-difference check of the summed batch loss with every loss active.
pub fn grad_check(
    model: &Model,
    batch: &[Example],
    ctx: &GraphContext,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    check_gradients(
        model.params(),
        |tape| {
            let mut parts = Vec::with_capacity(batch.len());
            for ex in batch {
                parts.push(example_loss(model, tape, ex, ctx, LossWeights::default(), 1.0)?.0);
            }
            tape.add_scalars(&parts)
        },
        opts,
    )
}
