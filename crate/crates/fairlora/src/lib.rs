//! Fairness-aware low-rank fine-tuning on a toy causal-attention classifier.
//!
//! The crate trains small attention classifiers whose weight updates are
//! restricted to low-rank adapter pairs, under four objectives: plain
//! cross-entropy, cross-entropy plus a differentiable accuracy-gap penalty,
//! clipped inverse-frequency group reweighting, and the combination of the
//! two. A synthetic generator produces demographically imbalanced datasets,
//! and an experiment runner reproduces method-comparison, penalty-strength,
//! and attribute sweeps with reproducible, seed-addressed results.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod seeds;
pub mod trainer;

pub use error::{Error, Result};
