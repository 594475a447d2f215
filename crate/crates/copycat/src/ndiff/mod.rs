//! Minimal differentiable-computation substrate: dense `f64` tensors, a
//! reverse-mode tape with exactly the primitives the model needs, named
//! parameter storage with seeded initialization, and a finite-difference
//! gradient checker.
//!
//! The tape is rebuilt for every forward pass (define-by-run). Operations
//! are an enum rather than closures so the whole backward pass is auditable
//! in one match statement.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{InitKind, ParameterStore};
pub use tape::{FfnnVars, Gradients, GruVars, Tape, VarId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NdiffError {
    #[error("objective value is not finite ({context})")]
    NonFinite { context: String },
    #[error("checkpoint is invalid: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
