//! Instrumental-variable quantile regression (IVQR) with gradient wild
//! bootstrap inference for data with a small, fixed number of large clusters.
//!
//! The crate provides:
//!
//! * an exact linear-programming kernel for weighted, gradient-shifted
//!   quantile regression ([`qr_solver`]),
//! * instrument construction enforcing orthogonality to the controls
//!   ([`instruments`]),
//! * the profiled IVQR estimator ([`estimator`]),
//! * gradient wild bootstrap Wald and Anderson-Rubin tests with
//!   randomization critical values and test-inversion confidence sets
//!   ([`bootstrap`]),
//! * baseline inference methods for comparison ([`alt_inference`]),
//! * spectral clustering of networks into inference clusters
//!   ([`clustering`]),
//! * simulation designs and a Monte Carlo harness producing rejection-rate
//!   tables ([`dgp`]),
//! * CSV/JSON input and output ([`io`]).
//!
//! All randomized procedures are driven by explicit seeds and are
//! reproducible: the same seed and configuration produce identical output.

pub mod alt_inference;
pub mod bootstrap;
pub mod clustering;
pub mod dataset;
pub mod dgp;
pub mod error;
pub mod estimator;
pub mod instruments;
pub mod io;
pub mod linalg;
pub mod qr_solver;
pub mod seeding;

pub use dataset::ClusteredDataset;
pub use error::{Error, Result, Warning};
pub use estimator::{A1Choice, IvqrFit, ProfileGrid};
pub use instruments::{InstrumentMethod, InstrumentRecipe, InstrumentSet};
pub use qr_solver::{QrProblem, QrSolution, SolveStatus};
