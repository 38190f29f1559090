//! Template corpus and question generation.
//!
//! Sentences realize one triple each, either `s r t .` or
//! `t is the r of s .`, with both entity names as mentions. Relation and
//! entity names are single vocabulary words.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::World;
use crate::kg::{KnowledgeGraph, Triple};
use crate::model::{Mention, Vocab, SPECIAL_TOKENS};

use super::io::PassageRecord;

pub const TEMPLATE_WORDS: [&str; 4] = ["is", "the", "of", "."];
pub const QUESTION_WORDS: [&str; 2] = ["what", "?"];

// separate streams so corpus and QA changes don't perturb each other
const CORPUS_STREAM: u64 = 0xC0;
const QA_STREAM: u64 = 0x9A;

/// Vocabulary over specials, template words, relation names and entity names.
pub fn qa_vocabulary(kg: &KnowledgeGraph) -> Vocab {
    let mut v = Vocab::new();
    for w in TEMPLATE_WORDS.iter().chain(&QUESTION_WORDS) {
        v.add(w);
    }
    for r in &kg.relation_names()[..kg.num_base_relations()] {
        v.add(r);
    }
    for e in kg.entity_names() {
        v.add(e);
    }
    v
}

struct Builder<'a> {
    kg: &'a KnowledgeGraph,
    tokens: Vec<String>,
    mentions: Vec<Mention>,
}

impl Builder<'_> {
    fn word(&mut self, w: &str) {
        self.tokens.push(w.to_string());
    }

    fn entity(&mut self, e: usize) {
        let start = self.tokens.len();
        self.tokens.push(self.kg.entity_name(e).to_string());
        self.mentions.push(Mention {
            start,
            end: start + 1,
            entity: e,
        });
    }

    fn sentence(&mut self, t: Triple, reversed: bool) {
        let rel = self.kg.relation_name(t.rel).to_string();
        if reversed {
            self.entity(t.tgt);
            for w in ["is", "the", &rel, "of"] {
                self.word(w);
            }
            self.entity(t.src);
        } else {
            self.entity(t.src);
            self.word(&rel);
            self.entity(t.tgt);
        }
        self.word(".");
    }
}

/// One passage per edge: the seed triple plus up to three triples sharing an
/// entity with what is already in the passage.
pub fn gen_corpus(world: &World) -> Vec<PassageRecord> {
    let kg = &world.kg;
    let spec = &world.spec.corpus;
    let mut rng = ChaCha8Rng::seed_from_u64(world.spec.seed ^ CORPUS_STREAM);
    let mut incident: Vec<Vec<Triple>> = vec![Vec::new(); kg.num_entities()];
    for &e in kg.base_edges() {
        incident[e.src].push(e);
        incident[e.tgt].push(e);
    }
    let mut out = Vec::with_capacity(kg.num_edges());
    for &seed in kg.base_edges() {
        let want = rng.gen_range(spec.min_sentences..=spec.max_sentences);
        let mut triples = vec![seed];
        let mut ents = BTreeSet::from([seed.src, seed.tgt]);
        while triples.len() < want {
            let pool: Vec<Triple> = ents
                .iter()
                .flat_map(|&e| incident[e].iter().copied())
                .filter(|t| !triples.contains(t))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let Some(&next) = pool.choose(&mut rng) else { break };
            ents.extend([next.src, next.tgt]);
            triples.push(next);
        }
        let mut b = Builder {
            kg,
            tokens: Vec::new(),
            mentions: Vec::new(),
        };
        for t in triples {
            let reversed = rng.gen_bool(0.5);
            b.sentence(t, reversed);
        }
        out.push(PassageRecord {
            tokens: b.tokens,
            mentions: b.mentions,
        });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

/// Question with one grounded mention and a trailing answer `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub tokens: Vec<String>,
    pub mentions: Vec<Mention>,
    pub answer: usize,
    pub hops: usize,
    /// Probed relation name; `r1/r2` for two-hop items.
    pub relation: String,
    /// Relations in walk order.
    pub path: Vec<String>,
    pub source: usize,
    pub split: Split,
}

impl QaItem {
    /// Raw index of the answer `[MASK]`.
    pub fn answer_index(&self) -> usize {
        self.tokens.len() - 1
    }
}

fn question(kg: &KnowledgeGraph, s: usize, path: &[usize]) -> (Vec<String>, Vec<Mention>) {
    let mut tokens: Vec<String> = ["what", "is"].map(String::from).to_vec();
    for &r in path.iter().rev() {
        tokens.push("the".into());
        tokens.push(kg.relation_name(r).into());
        tokens.push("of".into());
    }
    let start = tokens.len();
    tokens.push(kg.entity_name(s).into());
    tokens.push("?".into());
    tokens.push(SPECIAL_TOKENS[crate::model::MASK].into());
    (
        tokens,
        vec![Mention {
            start,
            end: start + 1,
            entity: s,
        }],
    )
}

fn functional_target(kg: &KnowledgeGraph, s: usize, r: usize) -> Option<usize> {
    kg.out_edges(s).iter().find(|e| e.rel == r).map(|e| e.tgt)
}

/// One-hop items for every functional triple, two-hop items for every chain
/// of two functional relations; split by source entity.
pub fn gen_qa(world: &World) -> Vec<QaItem> {
    let kg = &world.kg;
    let spec = &world.spec;
    let functional: Vec<usize> = (0..spec.relations.len())
        .filter(|&r| spec.relations[r].functional)
        .collect();
    let mut items = Vec::new();
    for &r in &functional {
        for e in kg.base_edges().filter(|e| e.rel == r) {
            items.push((e.src, vec![r], e.tgt));
        }
    }
    if spec.qa.two_hop {
        for &r1 in &functional {
            for &r2 in &functional {
                if r1 == r2 || spec.relations[r1].target != spec.relations[r2].source {
                    continue;
                }
                for e in kg.base_edges().filter(|e| e.rel == r1) {
                    match functional_target(kg, e.tgt, r2) {
                        Some(c) if c != e.src => items.push((e.src, vec![r1, r2], c)),
                        _ => {}
                    }
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ QA_STREAM);
    let mut sources: Vec<usize> = items.iter().map(|i| i.0).collect::<BTreeSet<_>>().into_iter().collect();
    sources.shuffle(&mut rng);
    let cut = (spec.qa.heldout_fraction * sources.len() as f64).round() as usize;
    let heldout: BTreeSet<usize> = sources[..cut].iter().copied().collect();
    items
        .into_iter()
        .map(|(s, path, answer)| {
            let (tokens, mentions) = question(kg, s, &path);
            let names: Vec<String> = path.iter().map(|&r| kg.relation_name(r).to_string()).collect();
            QaItem {
                tokens,
                mentions,
                answer,
                hops: path.len(),
                relation: names.join("/"),
                path: names,
                source: s,
                split: if heldout.contains(&s) {
                    Split::Heldout
                } else {
                    Split::Train
                },
            }
        })
        .collect()
}

/// Fraction of base edges realized by at least one sentence.
pub fn corpus_coverage(kg: &KnowledgeGraph, passages: &[PassageRecord]) -> f64 {
    let mut seen = BTreeSet::new();
    let ents: BTreeMap<&str, usize> = kg
        .entity_names()
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    for p in passages {
        // sentences end at "."; the relation word is the only relation name in each
        for sent in p.tokens.split(|t| t == ".") {
            let es: Vec<usize> = sent.iter().filter_map(|w| ents.get(w.as_str()).copied()).collect();
            let r = sent.iter().find_map(|w| kg.relation_id(w));
            if let ([a, b], Some(r)) = (es.as_slice(), r) {
                let (s, t) = if sent.len() == 3 { (*a, *b) } else { (*b, *a) };
                seen.insert(Triple::new(s, r, t));
            }
        }
    }
    let total = kg.base_edges().count();
    kg.base_edges().filter(|e| seen.contains(e)).count() as f64 / total.max(1) as f64
}
