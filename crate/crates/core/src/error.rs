//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// `log_so3` of a rotation whose angle is within 1e-3 rad of pi; the
    /// axis is numerically unrecoverable there.
    #[error("rotation angle {angle} rad is within 1e-3 of pi; log is ill-defined")]
    AngleNearPi { angle: f64 },

    /// The 6D rotation input has a near-zero or near-parallel basis pair.
    #[error("6D rotation basis is degenerate: {0}")]
    DegenerateBasis(&'static str),

    /// Projection of a point at or behind the camera plane (z_c < 1e-6).
    #[error("point at camera depth {z} is behind the camera")]
    BehindCamera { z: f64 },

    /// Fixed-point undistortion failed to reach the requested residual.
    #[error("undistortion did not converge: residual {residual}")]
    UndistortDiverged { residual: f64 },

    /// A residual vector whose length does not match the parameterization.
    #[error("residual has length {got}, parameterization needs {expected}")]
    BadLayout { expected: usize, got: usize },

    /// A non-finite value where a finite one is required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Non-finite gradient handed to the optimizer.
    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },

    /// Covariance (or its dampened form) is not positive definite even
    /// after eigenvalue clamping.
    #[error("matrix is not positive definite (min eigenvalue {min_eig})")]
    NotPositiveDefinite { min_eig: f64 },

    /// Mismatched dimensions between two objects that must agree.
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// An operation that needs at least one point got none.
    #[error("empty point set")]
    EmptyPointSet,

    /// A scene camera sees fewer points than the minimum required for a
    /// well-posed refinement.
    #[error("camera {camera} sees only {seen} points, needs at least {needed}")]
    InsufficientVisibility {
        camera: usize,
        seen: usize,
        needed: usize,
    },

    /// A value that violates a documented precondition (ranges, signs,
    /// base-camera requirements).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A refinement run hit a numeric error; the failing step is kept.
    #[error("refinement aborted at step {step}: {source}")]
    Aborted { step: usize, source: Box<Error> },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
