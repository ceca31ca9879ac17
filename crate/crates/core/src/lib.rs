//! Coarse-to-fine autoregressive prediction of spatial gene-expression counts.
//!
//! Genes are reordered by a two-level clustering ([`hierarchy`]), count
//! vectors are pooled into a coarse-to-fine schedule of group-level targets
//! ([`multiscale`]), and a causal transformer decoder ([`model`]) conditioned
//! on fused histology features and spot coordinates ([`condition`]) predicts
//! integer counts scale by scale. [`engine`] trains and decodes; [`eval`]
//! scores predictions.

pub mod autograd;
pub mod condition;
pub mod dataset;
pub mod engine;
mod error;
pub mod eval;
pub mod hierarchy;
pub mod model;
pub mod multiscale;
pub mod objective;
pub mod rng;

pub use error::{Error, Result};
