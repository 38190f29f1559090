//! On-disk layout of a generated world.
//!
//! Passages and questions are JSON lines; the graph uses the triples layout.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::corpus::{corpus_coverage, gen_corpus, gen_qa, qa_vocabulary, QaItem, Split};
use super::{gen_kg, WorldSpec};
use crate::error::{OreoError, Result};
use crate::kg::{load_dir, write_triples, KnowledgeGraph};
use crate::model::{Mention, Vocab, VOCAB_FILE};
use crate::objectives::Passage;

pub const PASSAGES_FILE: &str = "passages.jsonl";
pub const QA_TRAIN_FILE: &str = "qa_train.jsonl";
pub const QA_HELDOUT_FILE: &str = "qa_heldout.jsonl";
pub const WORLD_FILE: &str = "world.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub tokens: Vec<String>,
    pub mentions: Vec<Mention>,
}

impl PassageRecord {
    pub fn encode(&self, vocab: &Vocab) -> Result<Passage> {
        Ok(Passage {
            tokens: vocab.encode(&self.tokens)?,
            mentions: self.mentions.clone(),
        })
    }
}

pub type QaRecord = QaItem;

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| OreoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_passages(path: &Path, rows: &[PassageRecord]) -> Result<()> {
    write_jsonl(path, rows)
}

pub fn load_passages(path: &Path) -> Result<Vec<PassageRecord>> {
    read_jsonl(path)
}

pub fn write_qa(path: &Path, rows: &[QaRecord]) -> Result<()> {
    write_jsonl(path, rows)
}

pub fn load_qa(path: &Path) -> Result<Vec<QaRecord>> {
    read_jsonl(path)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct WorldSummary {
    spec: WorldSpec,
    num_edges: usize,
    num_passages: usize,
    corpus_coverage: f64,
    qa_train: usize,
    qa_heldout: usize,
}

/// Generates a world from `spec` and writes every file into `dir`.
pub fn generate_to_dir(spec: &WorldSpec, dir: &Path) -> Result<Dataset> {
    let data = Dataset::generate(spec)?;
    fs::create_dir_all(dir)?;
    write_triples(&data.kg, dir)?;
    data.vocab.save(&dir.join(VOCAB_FILE))?;
    write_passages(&dir.join(PASSAGES_FILE), &data.passages)?;
    write_qa(&dir.join(QA_TRAIN_FILE), &data.qa_train)?;
    write_qa(&dir.join(QA_HELDOUT_FILE), &data.qa_heldout)?;
    let summary = WorldSummary {
        spec: spec.clone(),
        num_edges: data.kg.num_edges(),
        num_passages: data.passages.len(),
        corpus_coverage: corpus_coverage(&data.kg, &data.passages),
        qa_train: data.qa_train.len(),
        qa_heldout: data.qa_heldout.len(),
    };
    fs::write(dir.join(WORLD_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(data)
}

/// Everything training and evaluation read from a data directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Base graph, before inverse closure.
    pub kg: KnowledgeGraph,
    pub vocab: Vocab,
    pub passages: Vec<PassageRecord>,
    pub qa_train: Vec<QaItem>,
    pub qa_heldout: Vec<QaItem>,
}

impl Dataset {
    /// In-memory generation, identical to what [`generate_to_dir`] writes.
    pub fn generate(spec: &WorldSpec) -> Result<Self> {
        let world = gen_kg(spec)?;
        let passages = gen_corpus(&world);
        let (qa_train, qa_heldout) = gen_qa(&world).into_iter().partition(|q| q.split == Split::Train);
        Ok(Dataset {
            vocab: qa_vocabulary(&world.kg),
            kg: world.kg,
            passages,
            qa_train,
            qa_heldout,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kg = load_dir(dir)?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let passages = load_passages(&dir.join(PASSAGES_FILE))?;
        let qa_train = load_qa(&dir.join(QA_TRAIN_FILE))?;
        let qa_heldout = load_qa(&dir.join(QA_HELDOUT_FILE))?;
        let n = kg.num_entities();
        let mentions = passages
            .iter()
            .flat_map(|p| &p.mentions)
            .chain(qa_train.iter().chain(&qa_heldout).flat_map(|q| &q.mentions));
        for m in mentions {
            if m.entity >= n {
                return Err(OreoError::Index {
                    index: m.entity,
                    extent: n,
                });
            }
        }
        Ok(Dataset {
            kg,
            vocab,
            passages,
            qa_train,
            qa_heldout,
        })
    }
}
