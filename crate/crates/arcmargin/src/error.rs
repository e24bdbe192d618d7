//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum Error {
    /// A vector that must be normalised has (near-)zero norm.
    #[error("vector {index} has norm below 1e-30 and cannot be normalised")]
    ZeroVector { index: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("invalid dimension d={d}, need d >= 2")]
    InvalidDimension { d: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value in input")]
    NonFiniteInput,

    #[error("theta {theta} outside [0, pi]")]
    ThetaOutOfRange { theta: f64 },

    #[error("invalid shard count k={k} for n={n} classes")]
    InvalidShardCount { n: usize, k: usize },

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("no positive pairs in the data")]
    NoPositivePairs,

    #[error("pair set needs at least one positive and one negative pair")]
    EmptyPairSet,

    #[error("could not place {wanted} class means with pairwise angle >= {min_deg} deg after {attempts} attempts")]
    RejectionExhausted {
        wanted: usize,
        min_deg: f64,
        attempts: usize,
    },

    #[error("non-finite gradient entry")]
    NonFiniteGradient,

    #[error("training loss became non-finite at iteration {iter}")]
    DivergenceDetected { iter: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
