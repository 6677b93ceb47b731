//! Dense tensors with a tape-based reverse-mode differentiation graph,
//! the layer primitives used by the localization network, an Adam optimizer
//! and a central-difference gradient checker.

mod error;
pub mod gradcheck;
mod graph;
pub mod nn;
mod ops;
mod param;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use ops::attention::AttnMask;
pub use ops::{giou_1d, Padding, RegPair};
pub use param::{adam_step, AdamConfig, Param, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
