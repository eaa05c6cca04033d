//! Self-supervised bag-of-visual-words representation learning on CIFAR-100.
//!
//! The pipeline has four training stages, each exposed as a CLI subcommand:
//!
//! 1. rotation-prediction pretraining of a compact residual backbone,
//! 2. a visual vocabulary built by mini-batch K-means over densely sampled
//!    feature vectors, plus per-image bag-of-words histogram targets,
//! 3. a second, freshly initialized backbone trained to reconstruct those
//!    histograms from perturbed images,
//! 4. frozen-backbone linear / nonlinear classifier probes.
//!
//! [`evaluation`] turns finished runs into a results table.

pub mod artifact;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod codebook;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fetch;
pub mod image;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod perturb;
pub mod training;

pub use error::{Error, Result};
