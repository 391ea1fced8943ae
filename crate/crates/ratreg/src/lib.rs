//! Regularization of linear ill-posed problems `A x = y^δ` by the aggregation
//! method and RatCG, with Tikhonov, iterated Tikhonov and CGNE baselines,
//! discrepancy-principle stopping, reproducible test problems, rate studies and
//! numerical checks of the underlying orthogonal-polynomial structure.

// `!(x > 0.0)` is used on purpose so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classical;
pub mod error;
pub mod harness;
pub mod io;
pub mod linop;
pub mod polydiag;
pub mod problems;
pub mod ratkrylov;
pub mod stopping;

pub use error::{Error, Result};
pub use linop::{DenseOperator, DiagonalOperator, LinearOperator};
