//! Desk-scale laboratory for controlling how a retrieval-augmented model
//! balances following contextual evidence against resisting context noise.
//!
//! The pipeline pretrains a micro transformer on a synthetic closed world of
//! facts, mines per-matrix importance scores for the two behaviors from
//! forward activations and gradient trajectories, standardizes them into a
//! subspace partition, and then fine-tunes each subspace with its own blend
//! of supervision while freezing everything else. An evaluation harness
//! scores adherence and robustness, plus noise recognition, memorization
//! leakage, and data-ratio sweeps.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod pipeline;
pub mod pretrain;
pub mod probe;
pub mod optim;
pub mod subspace;
pub mod tuning;
pub mod matrix;
pub mod model;
pub mod util;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
