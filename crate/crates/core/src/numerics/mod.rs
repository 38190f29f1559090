//! Dense `f64` tensors, named parameters, reverse-mode differentiation and
//! the checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{check_gradients, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use ops::{l1_normalize, layer_norm, matmul, mlp_project, scatter_add, softmax, LAYER_NORM_EPS};
pub use params::{Gradients, ParamId, ParamSet, Parameter};
pub use tape::{Tape, Var};
pub use tensor::{argmax, Tensor};
