//! Incomplete multi-view clustering without imputation: mask-informed fusion
//! of per-view graph-convolutional encodings into a view-common
//! representation, regularized by a graph-weighted contrastive loss, plus the
//! surrounding training, evaluation and data machinery.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below fix the default precision used by the CLI and the
//! serialized formats.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod network;
pub mod scalar;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision dataset.
pub type Dataset64 = dataset::MultiViewDataset<f64>;
/// Default-precision model parameters.
pub type Model64 = network::ModelState<f64>;
/// Default-precision fused graph.
pub type FusedGraph64 = graph::FusedGraph<f64>;
/// Default-precision training output.
pub type TrainOutput64 = train::TrainOutput<f64>;
/// Default-precision pipeline (scaled inputs plus static graphs).
pub type Pipeline64 = train::Pipeline<f64>;
