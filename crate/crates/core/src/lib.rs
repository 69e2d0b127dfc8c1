//! Weak separability testing for spatial functional fields.
//!
//! A functional field is one curve per location of a regular spatial lattice.
//! The field is weakly separable when its principal component score fields are
//! mutually uncorrelated at every pair of locations. The test implemented here
//! compares the eigen-structure of the ordinary covariance kernel with that of a
//! lag covariance kernel (pairs of curves a fixed distance apart), forms a
//! statistic for every pair of leading components, standardizes it with a
//! Gaussian-case variance estimated from fitted spatial correlation functions,
//! and refers the sum of squares to a χ² distribution.
//!
//! Modules, bottom-up:
//!
//! - [`numerics`]: special functions and a splittable seeded RNG.
//! - [`grid`]: lattice geometry, lag pair sets and the pair-distance multiset.
//! - [`field`]: the data model, CSV I/O and the covariance estimators.
//! - [`spectral`]: discretized eigenanalysis, truncation, matching, projection.
//! - [`spatialcorr`]: correlograms of score fields and their exponential or
//!   local-linear fits.
//! - [`wstest`]: the test itself.
//! - [`simulate`]: Matérn field generators and the Monte Carlo size/power driver.

pub mod error;
pub mod field;
pub mod grid;
pub mod numerics;
pub mod simulate;
pub mod spatialcorr;
pub mod spectral;
pub mod wstest;

pub use error::{Error, Result};
pub use field::{FunctionalField, Kernel};
pub use grid::{PairSet, SpatialGrid};
pub use numerics::SeededRng;
pub use spectral::EigenSystem;
pub use wstest::{CorrelationMethod, TestOptions, TestReport};
