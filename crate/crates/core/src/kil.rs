//! Knowledge Interaction Layer pieces.
//!
//! Relation prediction reads a `[REL]` hidden state, knowledge injection
//! writes the walk's aggregated entity embedding into a `[T-ENT]` hidden
//! state, and entity scoring ranks subgraph entities from an `[S-ENT]` (or
//! answer `[MASK]`) hidden state. The tape functions operate on row batches;
//! the free functions are single-vector conveniences.

use rand::Rng;

use crate::crw::{EntityDistribution, RelationDistribution};
use crate::error::{OreoError, Result};
use crate::kg::SubgraphIndex;
use crate::layers::{normal_tensor, Mlp, Norm};
use crate::numerics::{ParamId, ParamSet, Tape, Tensor, Var};

pub const K_REL: &str = "K_rel";
pub const V_ENT: &str = "V_ent";
pub const W_REL_LOG: &str = "w_rel_log";

/// Global relation keys `[|R|, d]`, entity values `[|E|, d_e]` and log relation importance `[|R|]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KgMemories {
    pub k_rel: ParamId,
    pub v_ent: ParamId,
    pub w_rel_log: ParamId,
}

impl KgMemories {
    pub fn register(
        ps: &mut ParamSet,
        num_relations: usize,
        num_entities: usize,
        d: usize,
        d_e: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k_rel = ps.insert(K_REL, normal_tensor(&[num_relations, d], 1.0 / (d as f64).sqrt(), rng))?;
        let v_ent = ps.insert(
            V_ENT,
            normal_tensor(&[num_entities, d_e], 1.0 / (d_e as f64).sqrt(), rng),
        )?;
        let w_rel_log = ps.insert(W_REL_LOG, Tensor::zeros(&[num_relations]))?;
        Ok(KgMemories {
            k_rel,
            v_ent,
            w_rel_log,
        })
    }

    /// Looks the memories up by their fixed names.
    pub fn find(ps: &ParamSet) -> Result<Self> {
        Ok(KgMemories {
            k_rel: ps.id(K_REL)?,
            v_ent: ps.id(V_ENT)?,
            w_rel_log: ps.id(W_REL_LOG)?,
        })
    }

    pub fn num_relations(&self, ps: &ParamSet) -> usize {
        ps.value(self.k_rel).rows()
    }

    pub fn num_entities(&self, ps: &ParamSet) -> usize {
        ps.value(self.v_ent).rows()
    }
}

/// Parameters owned by one reasoning step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KilStep {
    pub q_proj: Mlp,
    pub ln_query: Norm,
    pub v_proj: Mlp,
    pub ln_inject: Norm,
}

/// Entity-linking head shared by all mentions, applied before the first step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntityHead {
    pub e_proj: Mlp,
    pub ln: Norm,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KilParams {
    pub steps: Vec<KilStep>,
    pub entity_head: EntityHead,
}

impl KilParams {
    pub fn register(ps: &mut ParamSet, depth: usize, d: usize, d_e: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut steps = Vec::with_capacity(depth);
        for t in 1..=depth {
            let p = format!("kil{t}");
            steps.push(KilStep {
                q_proj: Mlp::register(ps, &format!("{p}.q_proj"), d, d, rng)?,
                ln_query: Norm::register(ps, &format!("{p}.ln_query"), d)?,
                v_proj: Mlp::register(ps, &format!("{p}.v_proj"), d_e, d, rng)?,
                ln_inject: Norm::register(ps, &format!("{p}.ln_inject"), d)?,
            });
        }
        let entity_head = EntityHead {
            e_proj: Mlp::register(ps, "e_proj", d, d_e, rng)?,
            ln: Norm::register(ps, "e_proj.ln", d_e)?,
        };
        Ok(KilParams { steps, entity_head })
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, t: usize) -> Result<&KilStep> {
        if t == 0 || t > self.steps.len() {
            return Err(OreoError::Config(format!(
                "reasoning step {t} outside 1..={}",
                self.steps.len()
            )));
        }
        Ok(&self.steps[t - 1])
    }
}

/// Relation logits `LN(Q-Proj(h)) · K_relᵀ` for rows of `h_rel` `[m, d]`.
pub fn relation_logits(tape: &mut Tape<'_>, step: &KilStep, k_rel: Var, h_rel: Var) -> Result<Var> {
    let q = step.q_proj.apply(tape, h_rel)?;
    let q = step.ln_query.apply(tape, q)?;
    tape.matmul_nt(q, k_rel)
}

/// `LN(h_tent + V-Proj(π · V_ent[I]))`; `pi` is `[m, |I|]`, `v_local` is `V_ent[I]`.
pub fn inject_on_tape(tape: &mut Tape<'_>, step: &KilStep, pi: Var, v_local: Var, h_tent: Var) -> Result<Var> {
    let agg = tape.matmul(pi, v_local)?;
    let v = step.v_proj.apply(tape, agg)?;
    let s = tape.add(h_tent, v)?;
    step.ln_inject.apply(tape, s)
}

/// Entity logits `LN(E-Proj(h)) · V_rowsᵀ` for rows of `h` `[m, d]`.
pub fn entity_logits(tape: &mut Tape<'_>, head: &EntityHead, v_rows: Var, h: Var) -> Result<Var> {
    let q = head.e_proj.apply(tape, h)?;
    let q = head.ln.apply(tape, q)?;
    tape.matmul_nt(q, v_rows)
}

fn row_input(tape: &mut Tape<'_>, h: &[f64]) -> Var {
    tape.constant(Tensor::vector(h.to_vec()).reshape(vec![1, h.len()]).expect("row shape"))
}

fn check_alignment(probs_len: usize, sub: &SubgraphIndex) -> Result<()> {
    if probs_len != sub.len() {
        return Err(OreoError::shape(format!(
            "distribution over {probs_len} entities, subgraph holds {}",
            sub.len()
        )));
    }
    Ok(())
}

/// `γ = softmax(LN(Q-Proj(h_rel)) · K_relᵀ)` for reasoning step `t` (1-based).
pub fn relation_predict(
    h_rel: &[f64],
    t: usize,
    kil: &KilParams,
    mem: &KgMemories,
    ps: &ParamSet,
) -> Result<RelationDistribution> {
    let step = kil.step(t)?;
    let mut tape = Tape::new(ps);
    let h = row_input(&mut tape, h_rel);
    let k = tape.param(mem.k_rel);
    let logits = relation_logits(&mut tape, step, k, h)?;
    let gamma = tape.softmax_rows(logits)?;
    RelationDistribution::new(tape.value(gamma).data().to_vec())
}

/// Injected `[T-ENT]` state for reasoning step `t`.
pub fn knowledge_inject(
    pi: &EntityDistribution,
    sub: &SubgraphIndex,
    h_tent: &[f64],
    t: usize,
    kil: &KilParams,
    mem: &KgMemories,
    ps: &ParamSet,
) -> Result<Vec<f64>> {
    check_alignment(pi.len(), sub)?;
    let step = kil.step(t)?;
    let mut tape = Tape::new(ps);
    let p = row_input(&mut tape, pi.probs());
    let v = tape.param(mem.v_ent);
    let v_local = tape.gather_rows(v, &sub.entities)?;
    let h = row_input(&mut tape, h_tent);
    let out = inject_on_tape(&mut tape, step, p, v_local, h)?;
    Ok(tape.value(out).data().to_vec())
}

/// Probability of each subgraph entity given an `[S-ENT]` or answer hidden state.
pub fn entity_score(
    h_sent: &[f64],
    sub: &SubgraphIndex,
    kil: &KilParams,
    mem: &KgMemories,
    ps: &ParamSet,
) -> Result<Vec<f64>> {
    if sub.is_empty() {
        return Err(OreoError::shape("entity scoring over an empty subgraph"));
    }
    let mut tape = Tape::new(ps);
    let h = row_input(&mut tape, h_sent);
    let v = tape.param(mem.v_ent);
    let v_local = tape.gather_rows(v, &sub.entities)?;
    let logits = entity_logits(&mut tape, &kil.entity_head, v_local, h)?;
    let p = tape.softmax_rows(logits)?;
    Ok(tape.value(p).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{k_hop_subgraph, KnowledgeGraph};
    use crate::numerics::{check_gradients, layer_norm, GradCheckOptions, LAYER_NORM_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        ps: ParamSet,
        kil: KilParams,
        mem: KgMemories,
    }

    fn fixture(n_rel: usize, n_ent: usize, d: usize, d_e: usize, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mem = KgMemories::register(&mut ps, n_rel, n_ent, d, d_e, &mut rng).unwrap();
        let kil = KilParams::register(&mut ps, 2, d, d_e, &mut rng).unwrap();
        Fixture { ps, kil, mem }
    }

    fn set(ps: &mut ParamSet, id: ParamId, data: Vec<f64>) {
        let p = ps.get_mut(id);
        assert_eq!(p.value.len(), data.len());
        p.value.data_mut().copy_from_slice(&data);
    }

    fn sub_of(n: usize, entities: &[usize]) -> SubgraphIndex {
        let kg = KnowledgeGraph::from_triples(n, 1, []).unwrap();
        k_hop_subgraph(entities, 0, &kg)
    }

    #[test]
    fn zero_query_gives_uniform_relations() {
        let mut f = fixture(3, 4, 2, 2, 0);
        let ln = f.kil.steps[0].ln_query;
        set(&mut f.ps, ln.gain, vec![0.0, 0.0]);
        let g = relation_predict(&[0.3, -0.4], 1, &f.kil, &f.mem, &f.ps).unwrap();
        for p in g.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_relation_softmax_value() {
        let mut f = fixture(2, 4, 2, 2, 0);
        let ln = f.kil.steps[0].ln_query;
        set(&mut f.ps, ln.gain, vec![0.0, 0.0]);
        set(&mut f.ps, ln.bias, vec![1.0, 0.0]);
        set(&mut f.ps, f.mem.k_rel, vec![1.0, 0.0, 0.0, 1.0]);
        let g = relation_predict(&[0.9, 0.1], 1, &f.kil, &f.mem, &f.ps).unwrap();
        // softmax([1, 0])
        let e = std::f64::consts::E;
        assert!((g.probs()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((g.probs()[0] - 0.731059).abs() < 1e-6);
        assert!((g.probs()[1] - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn duplicated_relation_keys_tie() {
        let mut f = fixture(3, 4, 4, 2, 5);
        let mut k = f.ps.value(f.mem.k_rel).data().to_vec();
        let row0 = k[0..4].to_vec();
        k[8..12].copy_from_slice(&row0);
        set(&mut f.ps, f.mem.k_rel, k);
        let g = relation_predict(&[0.1, 0.5, -0.3, 0.2], 2, &f.kil, &f.mem, &f.ps).unwrap();
        assert_eq!(g.probs()[0], g.probs()[2]);
    }

    #[test]
    fn wrong_width_and_step_are_rejected() {
        let f = fixture(3, 4, 4, 2, 0);
        assert!(matches!(
            relation_predict(&[0.0; 3], 1, &f.kil, &f.mem, &f.ps),
            Err(OreoError::Shape(_))
        ));
        assert!(matches!(
            relation_predict(&[0.0; 4], 3, &f.kil, &f.mem, &f.ps),
            Err(OreoError::Config(_))
        ));
        let sub = sub_of(4, &[0, 1]);
        let pi = EntityDistribution::one_hot(3, 0).unwrap();
        assert!(matches!(
            knowledge_inject(&pi, &sub, &[0.0; 4], 1, &f.kil, &f.mem, &f.ps),
            Err(OreoError::Shape(_))
        ));
    }

    /// V-Proj made the identity on nonnegative inputs so the aggregate is observable.
    fn identity_v_proj(f: &mut Fixture, d: usize) {
        let step = f.kil.steps[0];
        let eye: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
        set(&mut f.ps, step.v_proj.inner.w, eye.clone());
        set(&mut f.ps, step.v_proj.outer.w, eye);
    }

    fn explicit_inject(ps: &ParamSet, f: &Fixture, pi: &[f64], ents: &[usize], h: &[f64]) -> Vec<f64> {
        let v = ps.value(f.mem.v_ent);
        let mut s = h.to_vec();
        for (k, &e) in ents.iter().enumerate() {
            for (j, x) in s.iter_mut().enumerate() {
                *x += pi[k] * v.row(e)[j];
            }
        }
        let ln = f.kil.steps[0].ln_inject;
        layer_norm(&Tensor::vector(s), ps.get(ln.gain), ps.get(ln.bias), LAYER_NORM_EPS)
            .unwrap()
            .into_data()
    }

    #[test]
    fn one_hot_and_uniform_aggregates() {
        let d = 4;
        let mut f = fixture(2, 6, d, d, 3);
        identity_v_proj(&mut f, d);
        let v: Vec<f64> = (0..6 * d).map(|i| (i % 7) as f64 * 0.25).collect();
        set(&mut f.ps, f.mem.v_ent, v);
        let sub = sub_of(6, &[1, 4]);
        let h = [0.2, -0.1, 0.4, 0.0];
        let one_hot = EntityDistribution::one_hot(2, 1).unwrap();
        let out = knowledge_inject(&one_hot, &sub, &h, 1, &f.kil, &f.mem, &f.ps).unwrap();
        let want = explicit_inject(&f.ps, &f, &[0.0, 1.0], &[1, 4], &h);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let half = EntityDistribution::new(vec![0.5, 0.5]).unwrap();
        let out = knowledge_inject(&half, &sub, &h, 1, &f.kil, &f.mem, &f.ps).unwrap();
        let want = explicit_inject(&f.ps, &f, &[0.5, 0.5], &[1, 4], &h);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_pi_aggregate_matches_weighted_sum() {
        let d = 5;
        let mut f = fixture(2, 9, d, d, 11);
        identity_v_proj(&mut f, d);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..9 * d).map(|_| rng.gen::<f64>()).collect();
        set(&mut f.ps, f.mem.v_ent, v);
        let ents = [0, 2, 3, 6, 8];
        let sub = sub_of(9, &ents);
        let raw: Vec<f64> = (0..5).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let h: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
        let pi = EntityDistribution::new(probs.clone()).unwrap();
        let out = knowledge_inject(&pi, &sub, &h, 1, &f.kil, &f.mem, &f.ps).unwrap();
        let want = explicit_inject(&f.ps, &f, &probs, &ents, &h);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn entity_score_examples() {
        let mut f = fixture(2, 3, 4, 3, 0);
        let sub = sub_of(3, &[0, 1, 2]);
        set(&mut f.ps, f.mem.v_ent, vec![0.7; 9]);
        let p = entity_score(&[0.1, 0.2, 0.3, 0.4], &sub, &f.kil, &f.mem, &f.ps).unwrap();
        for x in &p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let single = sub_of(3, &[2]);
        assert_eq!(
            entity_score(&[0.1, 0.2, 0.3, 0.4], &single, &f.kil, &f.mem, &f.ps).unwrap(),
            vec![1.0]
        );
        // orthogonal embeddings, post-norm query = 10 · row 1
        set(
            &mut f.ps,
            f.mem.v_ent,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        let ln = f.kil.entity_head.ln;
        set(&mut f.ps, ln.gain, vec![0.0; 3]);
        set(&mut f.ps, ln.bias, vec![0.0, 10.0, 0.0]);
        let p = entity_score(&[0.1, 0.2, 0.3, 0.4], &sub, &f.kil, &f.mem, &f.ps).unwrap();
        let want = 10f64.exp() / (10f64.exp() + 2.0);
        assert!((p[1] - want).abs() < 1e-15);
        assert!(p[1] > 0.99);
    }

    #[test]
    fn outputs_are_distributions_for_random_inputs() {
        let f = fixture(5, 12, 8, 4, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sub = sub_of(12, &[0, 3, 5, 7, 11]);
        for _ in 0..50 {
            let h: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect();
            let g = relation_predict(&h, 1, &f.kil, &f.mem, &f.ps).unwrap();
            assert!((g.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let p = entity_score(&h, &sub, &f.kil, &f.mem, &f.ps).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = fixture(3, 7, 6, 4, 8);
        let sub = sub_of(7, &[1, 2, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = normal_tensor(&[2, 6], 1.0, &mut rng);
        let pi = Tensor::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.0, 1.0, 0.0]]).unwrap();
        let mix = normal_tensor(&[2, 6], 1.0, &mut rng);
        let kil = f.kil.clone();
        let mem = f.mem;
        let ents = sub.entities.clone();
        let report = check_gradients(
            &f.ps,
            |tape| {
                let hv = tape.constant(h.clone());
                let k = tape.param(mem.k_rel);
                let logits = relation_logits(tape, &kil.steps[0], k, hv)?;
                let gamma = tape.softmax_rows(logits)?;
                let v = tape.param(mem.v_ent);
                let v_local = tape.gather_rows(v, &ents)?;
                let p = tape.constant(pi.clone());
                let inj = inject_on_tape(tape, &kil.steps[1], p, v_local, hv)?;
                let m = tape.constant(mix.clone());
                let weighted = tape.mul(inj, m)?;
                let ent = entity_logits(tape, &kil.entity_head, v_local, inj)?;
                let ent = tape.softmax_rows(ent)?;
                let a = tape.sum(weighted);
                let b = tape.sum(ent);
                let c = tape.mul(gamma, gamma)?;
                let c = tape.sum(c);
                let e2 = tape.mul(ent, ent)?;
                let e2 = tape.sum(e2);
                tape.add_scalars(&[a, b, c, e2])
            },
            &GradCheckOptions {
                samples_per_param: None,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{:?}", report.worst());
        // only rows in I receive entity-memory gradient
        let mut tape = Tape::new(&f.ps);
        let v = tape.param(mem.v_ent);
        let v_local = tape.gather_rows(v, &ents).unwrap();
        let p = tape.constant(pi.clone());
        let hv = tape.constant(h.clone());
        let inj = inject_on_tape(&mut tape, &kil.steps[0], p, v_local, hv).unwrap();
        let m = tape.constant(mix.clone());
        let w = tape.mul(inj, m).unwrap();
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        let gv = g.get(mem.v_ent).unwrap();
        for e in [0, 3, 4, 6] {
            assert!(gv.row(e).iter().all(|x| *x == 0.0));
        }
        assert!(gv.row(1).iter().any(|x| *x != 0.0));
    }

    #[test]
    fn memories_found_by_name() {
        let f = fixture(3, 5, 4, 2, 0);
        assert_eq!(KgMemories::find(&f.ps).unwrap(), f.mem);
        assert_eq!(f.mem.num_relations(&f.ps), 3);
        assert_eq!(f.mem.num_entities(&f.ps), 5);
    }
}
