//! Fair latent spaces on frozen encoder embeddings.
//!
//! The crate trains an invertible flow on fixed embedding vectors so that
//! label and sensitive-attribute information land in disjoint latent blocks,
//! evaluates group-fairness metrics on linear probes, generates latent
//! counterfactuals by shifting along probe weight directions, and ships the
//! numerical diagnostics backing the construction.

pub mod counterfactual;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod losses;
pub mod metrics;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
