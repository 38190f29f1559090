//! Synthetic typed world: a knowledge graph with planted composition rules,
//! a grounded template corpus and question sets.
//!
//! Everything is a pure function of the [`WorldSpec`] and its seed.

mod corpus;
mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OreoError, Result};
use crate::kg::{KnowledgeGraph, Triple};

pub use corpus::{corpus_coverage, gen_corpus, gen_qa, qa_vocabulary, QaItem, Split, QUESTION_WORDS, TEMPLATE_WORDS};
pub use io::{
    generate_to_dir, load_passages, load_qa, write_passages, write_qa, Dataset, PassageRecord, QaRecord, PASSAGES_FILE,
    QA_HELDOUT_FILE, QA_TRAIN_FILE, WORLD_FILE,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityType {
    pub name: String,
    pub count: usize,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSpec {
    pub name: String,
    pub source: String,
    pub target: String,
    /// At most one target per source.
    #[serde(default)]
    pub functional: bool,
    /// Mean out-edges per source for non-functional relations.
    #[serde(default = "one")]
    pub per_source: f64,
    /// Fraction of sources that get any edge.
    #[serde(default = "one")]
    pub coverage: f64,
}

/// `relation ≡ first ∘ second`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub relation: String,
    pub first: String,
    pub second: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub min_sentences: usize,
    pub max_sentences: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            min_sentences: 2,
            max_sentences: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaSpec {
    /// Share of source entities whose questions are held out.
    pub heldout_fraction: f64,
    pub two_hop: bool,
}

impl Default for QaSpec {
    fn default() -> Self {
        QaSpec {
            heldout_fraction: 0.2,
            two_hop: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    pub entity_types: Vec<EntityType>,
    pub relations: Vec<RelationSpec>,
    #[serde(default)]
    pub rules: Vec<RuleSpec>,
    #[serde(default)]
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub qa: QaSpec,
}

fn rel(name: &str, source: &str, target: &str) -> RelationSpec {
    RelationSpec {
        name: name.into(),
        source: source.into(),
        target: target.into(),
        functional: true,
        per_source: 1.0,
        coverage: 1.0,
    }
}

fn many(name: &str, ty: &str, per_source: f64) -> RelationSpec {
    RelationSpec {
        functional: false,
        per_source,
        ..rel(name, ty, ty)
    }
}

impl Default for WorldSpec {
    /// 200 typed entities, 12 relations, two planted rules, roughly 1500 edges.
    fn default() -> Self {
        let types = [
            ("country", 25),
            ("city", 40),
            ("person", 80),
            ("org", 35),
            ("field", 10),
            ("language", 10),
        ];
        WorldSpec {
            seed: 0,
            entity_types: types
                .iter()
                .map(|(n, c)| EntityType {
                    name: n.to_string(),
                    count: *c,
                })
                .collect(),
            relations: vec![
                rel("head_of_state", "country", "person"),
                rel("residence", "person", "city"),
                rel("capital", "country", "city"),
                rel("headquarters", "org", "city"),
                rel("located_in", "city", "country"),
                rel("hq_country", "org", "country"),
                rel("employer", "person", "org"),
                rel("birthplace", "person", "city"),
                rel("field", "person", "field"),
                rel("language", "country", "language"),
                many("colleague", "person", 11.0),
                many("twin_city", "city", 5.0),
            ],
            rules: vec![
                RuleSpec {
                    relation: "capital".into(),
                    first: "head_of_state".into(),
                    second: "residence".into(),
                },
                RuleSpec {
                    relation: "hq_country".into(),
                    first: "headquarters".into(),
                    second: "located_in".into(),
                },
            ],
            corpus: CorpusSpec::default(),
            qa: QaSpec::default(),
        }
    }
}

impl WorldSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: WorldSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn num_entities(&self) -> usize {
        self.entity_types.iter().map(|t| t.count).sum()
    }

    fn relation(&self, name: &str) -> Result<usize> {
        self.relations
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| OreoError::Config(format!("unknown relation {name:?}")))
    }

    /// Whether `rel` is the head of a rule (its edges are derived).
    pub fn is_derived(&self, rel: usize) -> bool {
        self.rules.iter().any(|r| r.relation == self.relations[rel].name)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OreoError::Config(m));
        let mut names = BTreeSet::new();
        for t in &self.entity_types {
            if t.count == 0 || !names.insert(t.name.as_str()) {
                return bad(format!("entity type {:?} empty or repeated", t.name));
            }
        }
        let mut rels = BTreeSet::new();
        for r in &self.relations {
            if !rels.insert(r.name.as_str()) {
                return bad(format!("relation {:?} repeated", r.name));
            }
            if r.name.contains(char::is_whitespace) {
                return bad(format!("relation {:?} contains whitespace", r.name));
            }
            if !names.contains(r.source.as_str()) || !names.contains(r.target.as_str()) {
                return bad(format!("relation {:?} uses an unknown entity type", r.name));
            }
            if !(0.0..=1.0).contains(&r.coverage) || !(r.per_source >= 0.0) {
                return bad(format!("relation {:?} has invalid density", r.name));
            }
        }
        if self.relations.is_empty() {
            return bad("no relations".into());
        }
        for rule in &self.rules {
            let (h, a, b) = (
                self.relation(&rule.relation)?,
                self.relation(&rule.first)?,
                self.relation(&rule.second)?,
            );
            if h == a || h == b {
                return bad(format!("rule for {:?} refers to itself", rule.relation));
            }
            let (h, a, b) = (&self.relations[h], &self.relations[a], &self.relations[b]);
            if a.target != b.source || h.source != a.source || h.target != b.target {
                return bad(format!("rule for {:?} has incompatible types", rule.relation));
            }
        }
        if !(0.0..1.0).contains(&self.qa.heldout_fraction) {
            return bad("heldout_fraction must lie in [0, 1)".into());
        }
        if self.corpus.min_sentences == 0 || self.corpus.min_sentences > self.corpus.max_sentences {
            return bad("sentence counts invalid".into());
        }
        Ok(())
    }
}

/// Generated graph plus entity typing.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// Base graph without inverse relations.
    pub kg: KnowledgeGraph,
    /// Type index of every entity.
    pub entity_types: Vec<usize>,
}

impl World {
    pub fn entities_of_type(&self, ty: usize) -> Vec<usize> {
        (0..self.entity_types.len())
            .filter(|&e| self.entity_types[e] == ty)
            .collect()
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.spec.entity_types.iter().position(|t| t.name == name)
    }
}

fn derive_closure(spec: &WorldSpec, edges: &mut BTreeSet<Triple>) -> Result<()> {
    let ids: Vec<(usize, usize, usize)> = spec
        .rules
        .iter()
        .map(|r| {
            Ok((
                spec.relation(&r.relation)?,
                spec.relation(&r.first)?,
                spec.relation(&r.second)?,
            ))
        })
        .collect::<Result<_>>()?;
    // iterate to a fixpoint so rules may feed each other
    loop {
        let mut added = false;
        for &(h, a, b) in &ids {
            let mut second: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for e in edges.iter().filter(|e| e.rel == b) {
                second.entry(e.src).or_default().push(e.tgt);
            }
            let new: Vec<Triple> = edges
                .iter()
                .filter(|e| e.rel == a)
                .flat_map(|e| {
                    second
                        .get(&e.tgt)
                        .into_iter()
                        .flatten()
                        .map(move |&c| Triple::new(e.src, h, c))
                })
                .collect();
            for t in new {
                added |= edges.insert(t);
            }
        }
        if !added {
            return Ok(());
        }
    }
}

/// Random typed graph honoring functional flags, closed under every rule.
pub fn gen_kg(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut names = Vec::with_capacity(spec.num_entities());
    let mut types = Vec::with_capacity(spec.num_entities());
    let mut by_type: Vec<Vec<usize>> = Vec::new();
    for (ti, t) in spec.entity_types.iter().enumerate() {
        let mut ids = Vec::with_capacity(t.count);
        for i in 0..t.count {
            ids.push(names.len());
            names.push(format!("{}_{i}", t.name));
            types.push(ti);
        }
        by_type.push(ids);
    }
    let type_of = |name: &str| {
        spec.entity_types
            .iter()
            .position(|t| t.name == name)
            .expect("validated")
    };
    let mut edges = BTreeSet::new();
    for (ri, r) in spec.relations.iter().enumerate() {
        if spec.is_derived(ri) {
            continue;
        }
        let targets = &by_type[type_of(&r.target)];
        for &s in &by_type[type_of(&r.source)] {
            if !rng.gen_bool(r.coverage) {
                continue;
            }
            let pool: Vec<usize> = targets.iter().copied().filter(|&t| t != s).collect();
            let k = if r.functional {
                1
            } else {
                // uniform on 0..=2·mean keeps the mean at per_source
                rng.gen_range(0..=(2.0 * r.per_source).round() as usize)
            };
            for &t in pool.choose_multiple(&mut rng, k.min(pool.len())) {
                edges.insert(Triple::new(s, ri, t));
            }
        }
    }
    derive_closure(spec, &mut edges)?;
    for (ri, r) in spec.relations.iter().enumerate() {
        if !r.functional {
            continue;
        }
        let mut seen = BTreeSet::new();
        for e in edges.iter().filter(|e| e.rel == ri) {
            if !seen.insert(e.src) {
                return Err(OreoError::Generation(format!(
                    "functional relation {:?} has several targets for {}",
                    r.name, names[e.src]
                )));
            }
        }
    }
    let kg = KnowledgeGraph::new(names, spec.relations.iter().map(|r| r.name.clone()).collect(), edges)?;
    Ok(World {
        spec: spec.clone(),
        kg,
        entity_types: types,
    })
}

/// Copy of `kg` without the edges of `rel` (and its inverse on closed graphs).
pub fn remove_relation_edges(kg: &KnowledgeGraph, rel: usize) -> Result<KnowledgeGraph> {
    kg.remove_relation_edges(rel)
}
