//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! Forward passes record onto a [`Graph`]; parameters live in a
//! [`ParamStore`] that graphs borrow immutably, so several graphs can share
//! one set of frozen weights. [`Graph::backward`] returns gradients keyed by
//! parameter index.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod scalar;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, grad_check_inputs};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, CosineSchedule};
pub use scalar::Scalar;
pub use tensor::{ParamStore, Tensor};
