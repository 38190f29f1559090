//! Checkpoint container.
//!
//! Layout: the magic line `OREOCKPT`, a line holding the manifest length in
//! bytes, the JSON manifest, then the payload of little-endian `f64` values.
//! Manifest offsets are byte offsets into the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{OreoError, Result};

const MAGIC: &str = "OREOCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: ParamSet, meta: serde_json::Value) -> Self {
        Checkpoint { params, meta }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut payload = Vec::with_capacity(self.params.num_values() * 8);
        for p in self.params.iter() {
            entries.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: payload.len(),
            });
            for v in p.value.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = serde_json::to_vec(&Manifest {
            version: 1,
            entries,
            meta: self.meta.clone(),
        })?;
        let mut out = format!("{MAGIC}\n{}\n", manifest.len()).into_bytes();
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| OreoError::Checkpoint(m.to_string());
        let mut lines = bytes.splitn(3, |b| *b == b'\n');
        if lines.next() != Some(MAGIC.as_bytes()) {
            return Err(bad("missing magic header"));
        }
        let len: usize = std::str::from_utf8(lines.next().ok_or_else(|| bad("truncated"))?)
            .map_err(|_| bad("manifest length is not text"))?
            .trim()
            .parse()
            .map_err(|_| bad("manifest length is not a number"))?;
        let rest = lines.next().ok_or_else(|| bad("truncated"))?;
        if rest.len() < len {
            return Err(bad("manifest truncated"));
        }
        let manifest: Manifest = serde_json::from_slice(&rest[..len])?;
        let payload = &rest[len..];
        let mut params = ParamSet::new();
        for e in manifest.entries {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 8;
            if end > payload.len() {
                return Err(bad(&format!("entry {} exceeds payload", e.name)));
            }
            let data = payload[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(e.name, Tensor::new(e.shape, data)?)?;
        }
        Ok(Checkpoint {
            params,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in prop::collection::vec(prop::num::f64::ANY, 0..40),
            cols in 1usize..5,
        ) {
            let rows = values.len() / cols;
            let data: Vec<f64> = values[..rows * cols].to_vec();
            let mut ps = ParamSet::new();
            ps.insert("K_rel", Tensor::matrix(rows, cols, data.clone()).unwrap()).unwrap();
            ps.insert("w_rel_log", Tensor::vector(values.clone())).unwrap();
            let ck = Checkpoint::new(ps, serde_json::json!({"step": 3}));
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            let a: Vec<u64> = back.params.by_name("w_rel_log").unwrap().value.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.params.by_name("K_rel").unwrap().value.shape(), &[rows, cols]);
            prop_assert_eq!(back.meta, serde_json::json!({"step": 3}));
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        assert!(Checkpoint::from_bytes(b"OREOCKPT\n99\n{}").is_err());
    }
}
