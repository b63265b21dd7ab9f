//! Size and power of the classical F-test when a low-dimensional working
//! regression is fitted to data from a high-dimensional linear model.
//!
//! The crate is organised bottom-up:
//!
//! * [`specfun`]: incomplete beta, central/noncentral F and normal kernels.
//! * [`linmodel`]: symmetric square roots, QR least squares, the F-statistic
//!   and the Kolmogorov-Smirnov sup-distance.
//! * [`dgp`]: design laws, covariance models, Haar rotations, surrogate
//!   parameters and dataset sampling.
//! * [`mc`]: the deterministic parallel Monte Carlo engine.
//! * [`oracle`]: exact enumeration checks for Rademacher designs.
//! * [`rng`]: counter-derived random substreams.

pub mod dgp;
pub mod error;
pub mod linmodel;
pub mod mc;
pub mod oracle;
pub mod rng;
pub mod specfun;

pub use error::{Error, Result};
