//! Spectral Faedo-Galerkin solver for the viscous compressible MHD equations
//! with multiplicative stochastic forcing.
//!
//! The velocity and magnetic fields live in a finite-dimensional space spanned
//! by Dirichlet-Laplacian eigenfunctions on a box; the density is evolved on a
//! finite-volume grid by a positivity-preserving upwind scheme with optional
//! artificial viscosity. Time integration is Euler-Maruyama on the momentum
//! variable, with the norm cut-off and stopping-time truncation that make the
//! coupled system globally well posed at fixed dimension.
//!
//! Besides the solver itself, the crate ships an executable verification
//! suite: energy-budget accounting with Ito corrections, martingale and
//! quadratic-variation statistics over ensembles, a Bogovskii-type right
//! inverse of the divergence, renormalized-continuity residuals, and
//! self-convergence studies over the Galerkin dimension and the
//! regularization parameters.
//!
//! Entry points:
//! - [`montecarlo::cli`] implements the command-line interface
//!   (`simulate`, `study`, `validate-noise`, `selftest`).
//! - [`montecarlo::run_ensemble`] and [`montecarlo::convergence_study`]
//!   drive seeded, reproducible Monte Carlo experiments.
//! - [`stepper::run_path`] integrates a single sample path.

pub mod basis;
pub mod diagnostics;
pub mod error;
pub mod galerkin;
pub mod montecarlo;
pub mod noise;
pub mod stepper;
pub mod transport;

pub use error::{Error, Result};
