//! PolSAR land-cover classification from noisy polarimetric features.
//!
//! The pipeline has three stages: per-pixel neighbourhood denoising with a
//! mixture-of-Gaussians robust low-rank factorization ([`rlrmf`], [`patch`]),
//! a small convolutional classifier ([`classifier`]), and Potts-MRF label
//! refinement by min-sum belief propagation ([`mrf`]). [`eval`] scores label
//! maps and runs ablations; [`pipeline`] wires the stages to on-disk artifacts.

pub mod classifier;
pub mod data;
pub mod error;
pub mod eval;
pub mod mrf;
pub mod patch;
pub mod pipeline;
pub mod rlrmf;

pub use error::{Error, ErrorClass, Result};
