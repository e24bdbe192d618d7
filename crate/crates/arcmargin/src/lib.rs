//! Angular-margin classification losses on the unit hypersphere.
//!
//! The crate bundles:
//! * [`hypersphere`]: unit-vector geometry, uniform sampling and the
//!   expected nearest-neighbour separation of random class centres;
//! * [`margin`]: the combined (m1, m2, m3, s) margin softmax family with
//!   analytic gradients, plus intra/inter/triplet penalties and binary
//!   decision boundaries;
//! * [`autonet`]: a small perceptron, SGD with momentum and weight decay,
//!   synthetic cluster data and a deterministic training loop;
//! * [`anglestats`]: post-hoc angle diagnostics and pair-verification
//!   accuracy;
//! * [`shardhead`]: a deterministic simulator of the class-sharded
//!   classification head with its communication cost model;
//! * [`gradcheck`]: the central-difference harness used to verify every
//!   analytic gradient.

pub mod anglestats;
pub mod autonet;
pub mod error;
pub mod gradcheck;
pub mod hypersphere;
pub mod margin;
pub mod shardhead;

pub use error::{Error, Result};
