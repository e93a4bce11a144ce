//! Numerical laboratory for in-context n-gram learning with a two-layer
//! attention-only transformer.
//!
//! The crate is organised bottom-up:
//!
//! * [`seqmodel`] samples ground-truth n-gram sources (Dirichlet transition
//!   tensors), their lifted first-order chains and stationary distributions,
//!   and generates sequences from them.
//! * [`estimators`] implements the in-context k-gram counting estimators and
//!   their non-contiguous (subset-history) variants.
//! * [`transformer`] is the simplified disentangled transformer: positional
//!   first-layer heads, a second layer that compares concatenated histories,
//!   and a fixed value/unembedding path that turns attention into a token
//!   distribution.
//! * [`grad`] holds closed-form Jacobians and cross-entropy gradients plus a
//!   finite-difference oracle.
//! * [`constructions`] builds the parameter points that implement k-gram
//!   estimators and probes how close they are to stationarity.
//! * [`training`] runs Adam on fresh batches, logs metrics and detects loss
//!   plateaus against estimator baselines.
//! * [`plot`] and [`cli`] emit CSV/JSON/SVG artifacts.

pub mod cli;
pub mod constructions;
pub mod error;
pub mod estimators;
pub mod grad;
pub mod plot;
pub mod rng;
pub mod seqmodel;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
