//! Text formats: tab-separated triples plus one-token-per-line vocabularies.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{KnowledgeGraph, Triple};
use crate::error::{OreoError, Result};

pub const ENTITIES_FILE: &str = "entities.txt";
pub const RELATIONS_FILE: &str = "relations.txt";
pub const TRIPLES_FILE: &str = "triples.tsv";

fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tok = line.trim_end_matches('\r');
        if tok.is_empty() {
            continue;
        }
        if seen.insert(tok.to_string(), i).is_some() {
            return Err(OreoError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("duplicate token {tok:?}"),
            });
        }
        out.push(tok.to_string());
    }
    Ok(out)
}

/// Reads a triples file against its entity and relation vocabularies.
///
/// Ids follow vocabulary line order; duplicate triple lines collapse.
pub fn load_triples(triples: &Path, entities: &Path, relations: &Path) -> Result<KnowledgeGraph> {
    let ents = read_vocab(entities)?;
    let rels = read_vocab(relations)?;
    let ent_ids: HashMap<&str, usize> = ents.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let rel_ids: HashMap<&str, usize> = rels.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let text = fs::read_to_string(triples)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| OreoError::Parse {
            path: triples.to_path_buf(),
            line: i + 1,
            msg,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, got {}", cols.len())));
        }
        let ent = |s: &str| {
            ent_ids
                .get(s)
                .copied()
                .ok_or_else(|| err(format!("unknown entity {s:?}")))
        };
        let src = ent(cols[0])?;
        let rel = rel_ids
            .get(cols[1])
            .copied()
            .ok_or_else(|| err(format!("unknown relation {:?}", cols[1])))?;
        let tgt = ent(cols[2])?;
        out.push(Triple::new(src, rel, tgt));
    }
    KnowledgeGraph::new(ents, rels, out)
}

/// Loads `entities.txt`, `relations.txt` and `triples.tsv` from `dir`.
pub fn load_dir(dir: &Path) -> Result<KnowledgeGraph> {
    load_triples(
        &dir.join(TRIPLES_FILE),
        &dir.join(ENTITIES_FILE),
        &dir.join(RELATIONS_FILE),
    )
}

/// Writes the base (pre-closure) graph in the three-file layout.
pub fn write_triples(kg: &KnowledgeGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut ents = String::new();
    for e in kg.entity_names() {
        writeln!(ents, "{e}").expect("write to string");
    }
    let mut rels = String::new();
    for r in &kg.relation_names()[..kg.num_base_relations()] {
        writeln!(rels, "{r}").expect("write to string");
    }
    let mut triples = String::new();
    for t in kg.base_edges() {
        writeln!(
            triples,
            "{}\t{}\t{}",
            kg.entity_name(t.src),
            kg.relation_name(t.rel),
            kg.entity_name(t.tgt)
        )
        .expect("write to string");
    }
    fs::write(dir.join(ENTITIES_FILE), ents)?;
    fs::write(dir.join(RELATIONS_FILE), rels)?;
    fs::write(dir.join(TRIPLES_FILE), triples)?;
    Ok(())
}
