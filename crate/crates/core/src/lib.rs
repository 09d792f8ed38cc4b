//! Bayesian and likelihood-based inference for incomplete multivariate data.
//!
//! The crate covers maximum likelihood by EM, data augmentation for the
//! multivariate normal, exact posterior draws under monotone missingness,
//! chained-equation imputation, penalized-spline-of-propensity imputation,
//! the combining rules for multiply imputed data, and a harness for
//! checking the frequentist calibration of all of the above.

// Negated comparisons are deliberate: they reject NaN with the out-of-range
// values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod dataset;
pub mod error;
pub mod linalg;
pub mod mi_pool;
pub mod monotone_bayes;
pub mod mvn_da;
pub mod mvn_em;
pub mod pspp;
pub mod regression;
pub mod sampler;
pub mod srmi;

pub use dataset::{DataMatrix, MissingMask, VariableKind, VariableMeta};
pub use error::{Error, Result};
pub use linalg::SymMatrix;
pub use mvn_em::MvnParams;
pub use sampler::RngStream;
