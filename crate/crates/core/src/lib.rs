//! Stochastic regularization by randomized feature grouping for generalized
//! linear models.
//!
//! The library covers the full pipeline:
//!
//! * [`linalg`] — dense row-major matrices and the sparse grouping matrix
//!   (one nonzero per column, orthonormal rows) with O(p) products.
//! * [`rng`] — a seedable, counter-based random source; every stochastic
//!   operation takes one explicitly.
//! * [`grouping`] — feature adjacency graphs and recursive nearest
//!   agglomeration (ReNA) producing partitions and grouping matrices.
//! * [`bank`] — banks of grouping matrices built from random training
//!   subsamples, sampled during training.
//! * [`data`] — dataset ingestion, binary/CSV formats, Gaussian noise,
//!   stratified splits, and synthetic structured-image generation.
//! * [`glm`] — multinomial logistic regression (plus a Gaussian family for
//!   theory checks) trained by minibatch SGD or ADAM under four
//!   regularization schemes: none, l2, feature dropout, feature grouping.
//! * [`analysis`] — the closed-form penalty machinery: smoothing operator,
//!   grouping-noise second moments, variance of the projected target, and
//!   Taylor-expansion diagnostics.
//! * [`experiment`] — sweep/bench orchestration shared by the CLI and the
//!   acceptance suite.
//!
//! With the `parallel` feature (default) the data-parallel inner loops run
//! on rayon; without it the same code paths run sequentially. Both modes
//! produce bit-identical results: parallelism is only applied across
//! independent output blocks, never across a floating-point reduction.

pub mod analysis;
pub mod bank;
pub mod data;
mod error;
mod exec;
pub mod glm;
pub mod grouping;
pub mod linalg;
pub mod rng;

pub mod experiment;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, SparseGrouping};
pub use rng::RngState;
