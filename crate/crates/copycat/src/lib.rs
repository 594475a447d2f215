//! Unsupervised abstractive opinion summarization.
//!
//! A hierarchical latent-variable model is trained to reconstruct each
//! review in a group from the others; at inference time the mean group code
//! seeds a pointer-generator decoder that writes a consensus summary.
//! Extractive baselines and evaluation metrics live alongside the model so
//! the whole pipeline runs from one binary.

pub mod baselines;
#[cfg(not(target_arch = "wasm32"))]
pub mod cli;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod generate;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod ndiff;
pub mod objective;
