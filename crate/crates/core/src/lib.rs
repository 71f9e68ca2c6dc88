//! Multi-source multimodal progressive domain adaptation.
//!
//! The crate trains a small multi-branch classifier on several labelled
//! source domains and one unlabelled target domain. Adaptation combines
//! correlation alignment, a density-divergence loss, entropy maximisation,
//! and a conditional adversarial discriminator trained through a gradient
//! reversal node.
//!
//! Modules, bottom up:
//! - [`ndgraph`]: matrices and reverse-mode autodiff.
//! - [`model`]: encoders, fusion, heads, conditional map, discriminator.
//! - [`losses`]: every scalar objective.
//! - [`trainer`]: batching, scheduling, optimisers and the training loop.
//! - [`synthdata`]: domain-shifted synthetic data and CSV IO.
//! - [`evalx`]: accuracy/F1 and the cross-domain gap matrix.
//! - [`exec`]: sequential or rayon-backed fan-out over independent runs.

pub mod error;
pub mod evalx;
pub mod exec;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod ndgraph;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use ndgraph::{Graph, Tensor, Var};
