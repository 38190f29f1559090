//! Knowledge-graph reasoning interleaved with a transformer encoder.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors, reverse-mode differentiation, checkpoints.
//! - [`kg`]: the sparse knowledge graph and k-hop subgraph extraction.
//! - [`crw`]: the contextualized random walk transition.
//! - [`layers`]: linear, layer-norm and projection parameter bundles.
//! - [`kil`]: relation prediction, knowledge injection and entity scoring.
//! - [`model`]: the instrumented transformer encoder with interaction layers.
//! - [`objectives`]: masking, the grounded dependency graph and the losses.
//! - [`synth`]: the synthetic world, corpus and question generator.
//! - [`train`]: optimisation, evaluation, rule extraction and gradient checks.

pub mod crw;
pub mod error;
pub mod kg;
pub mod kil;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod synth;
pub mod train;

pub use error::{OreoError, Result};
