//! Influence-based training data selection.
//!
//! Given per-sample source gradients (or cheap embeddings plus a handful of
//! landmark gradients) and target gradients, this crate builds the influence
//! objects `p` and `Q`, solves the regularized simplex-constrained weight
//! problem, tunes the regularizer to an exact selection budget and picks the
//! training subset. The [`toylab`] and [`verify`] modules reproduce the
//! linear running example and check the approximation guarantees empirically.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod influence;
pub mod landmark;
pub mod linalg;
pub mod matstore;
pub mod qpsolve;
pub mod rng;
pub mod sketch;
pub mod toylab;
pub mod verify;

pub use error::{Error, ErrorKind, Result};
pub use influence::{AdamState, InfluenceObjects, Order, TargetGradient};
pub use matstore::{Dtype, GradientMatrix, IndexList, Role, ZeroPolicy};
pub use qpsolve::{QpProblem, SelectMode, TunedLambda, WeightSolution};
pub use sketch::{SketchMethod, SketchSpec};
