//! Self-supervised visual attribute disentanglement.
//!
//! An encoder splits each image's code into `k` attribute chunks and an
//! unspecified Gaussian chunk. Composite augmentations with a perturbation
//! mask, per-batch attribute context vectors and a center loss push each
//! chunk to track a single generative factor.

pub mod augment;
pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
