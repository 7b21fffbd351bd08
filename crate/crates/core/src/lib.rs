//! Design and analysis of matched-pair randomized experiments with
//! imperfect compliance.
//!
//! The crate covers the full workflow:
//!
//! * [`pairing`] forms pairs from baseline covariates, orders them into
//!   pairs-of-pairs blocks and randomizes treatment within pairs;
//! * [`estimators`] computes the Wald (2SLS) estimator of the complier
//!   average treatment effect and its covariate-adjusted refinements;
//! * [`variance`] provides the consistent pairs-of-pairs variance
//!   estimator alongside the conventional robust ones (which are
//!   generally conservative under matched pairs);
//! * [`inference`] turns any estimate/variance pair into tests and
//!   confidence intervals;
//! * [`sim`] is a deterministic Monte Carlo harness for rejection rates,
//!   bias, RMSE and power curves under the built-in designs.
//!
//! Numeric routines are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix `f64`, the precision the command-line tool uses.
//!
//! ```
//! use mpiv::{pairing, report, Sample};
//! use nalgebra::{DMatrix, DVector};
//!
//! // Two pairs, one treated unit in each.
//! let sample = Sample::new(
//!     DVector::from_vec(vec![3.0, 1.0, 2.0, 2.0]),
//!     vec![1, 0, 0, 0],
//!     vec![1, 0, 1, 0],
//!     DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]),
//!     DMatrix::zeros(4, 0),
//! )
//! .unwrap();
//! let pairs = pairing::match_pairs_scalar(&[1.0, 2.0, 3.0, 4.0]).unwrap();
//! let report =
//!     report::analyze_sample(&sample, &pairs, &report::AnalyzeOptions::default()).unwrap();
//! assert_eq!(report.unadjusted.delta_hat, 2.0);
//! ```

pub mod csv_io;
pub mod data;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod normal;
pub mod pairing;
pub mod regression;
pub mod report;
pub mod rng;
pub mod sim;
pub mod variance;

mod scalar;
#[cfg(test)]
pub(crate) mod testkit;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Observed sample at the working precision of the CLI.
pub type Sample = data::ObservedSample<f64>;
/// Single-precision observed sample.
pub type Sample32 = data::ObservedSample<f32>;
/// Fitted regression at working precision.
pub type Fit = regression::FitResult<f64>;
/// Potential-outcome draws at working precision.
pub type Potential = sim::PotentialData<f64>;
