//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or config-file invariant was violated. The message names
    /// the invariant so the CLI can surface it verbatim (exit code 2).
    #[error("config: {0}")]
    Config(String),

    /// Requested more modes than the quadrature grid can resolve without
    /// aliasing.
    #[error("grid too coarse for {n_per_axis} modes per axis: need at least {needed} grid points, got {got}")]
    GridTooCoarse {
        n_per_axis: usize,
        needed: usize,
        got: usize,
    },

    #[error("shape mismatch: expected length {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    /// Advective CFL condition failed; carries the largest admissible step.
    #[error("CFL violation: dt = {dt:.6e} exceeds admissible dt = {admissible:.6e}")]
    CflViolation { dt: f64, admissible: f64 },

    #[error("density must be nonnegative, found min = {min:.6e}")]
    NegativeDensity { min: f64 },

    /// The weighted mass operator is only invertible for strictly positive
    /// density.
    #[error("density must be strictly positive here, found min = {min:.6e}")]
    NonPositiveDensity { min: f64 },

    /// A path was aborted mid-run (positivity failure or CFL breach),
    /// with the time at which it happened.
    #[error("path aborted at t = {t:.6}: {reason}")]
    PathAborted { t: f64, reason: String },

    /// Picard iteration for the implicit substep did not contract.
    #[error("no contraction at dt = {dt:.3e} (estimated factor {kappa:.3} >= 1); reduce dt")]
    NoContraction { dt: f64, kappa: f64 },

    /// Input to the divergence solver must integrate to zero.
    #[error("divergence data not mean-zero: |integral| = {integral:.3e} exceeds tolerance {tol:.3e}")]
    NotMeanZero { integral: f64, tol: f64 },

    /// Exponent outside the admissible pressure-integrability range.
    #[error("exponent theta = {theta} outside admissible range (0, {max:.6})")]
    ThetaOutOfRange { theta: f64, max: f64 },

    #[error("not enough sample paths: need at least {needed}, got {got}")]
    TooFewPaths { needed: usize, got: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
