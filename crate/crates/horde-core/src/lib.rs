//! Trainable sketches of high-order feature moments, exact distribution
//! distance oracles that certify the bounds those sketches optimize, and a
//! small metric-learning stack (backbone, losses, trainer support, retrieval
//! evaluation) built on a reverse-mode operation graph.
//!
//! All numeric code is generic over [`scalar::Real`] (`f32` or `f64`); the
//! shipped pipeline uses the `f64` aliases below.

pub mod data;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod scalar;
pub mod sketch;
pub mod tensor;

pub use scalar::Real;

/// Double-precision tensor, the pipeline default.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision operation graph.
pub type Graph64 = graph::Graph<f64>;
/// Double-precision projector stack.
pub type ProjectorStack64 = sketch::ProjectorStack<f64>;
/// Double-precision empirical distribution.
pub type EmpiricalDistribution64 = oracle::EmpiricalDistribution<f64>;
/// Double-precision dataset.
pub type Dataset64 = data::Dataset<f64>;
