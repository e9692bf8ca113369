//! Small area estimation of mean vectors under a multivariate nested-error
//! regression model.
//!
//! The library fits the unit-level model
//!
//! ```text
//! y_di = X_di beta + u_d + e_di,   u_d ~ N_R(0, Sigma_u),  e_di ~ N_R(0, Sigma_e),
//! ```
//!
//! by restricted maximum likelihood, aggregates unit records into survey-weighted
//! area means, and produces several competing predictors of the area mean vectors
//! together with analytic and parametric-bootstrap MSE matrices:
//!
//! * `DIR` — weighted direct estimator with a design-based covariance,
//! * `MYR` — multivariate pseudo-EBLUP driven by survey-weighted coefficients,
//! * `MU`  — the same predictor on weights calibrated so that the survey-weighted
//!   covariate means match their population values,
//! * `UYR` — independent univariate pseudo-EBLUPs, one response at a time,
//! * `MFH` — multivariate Fay-Herriot EBLUP regressing direct estimates on
//!   population covariate means.
//!
//! The [`simulation`] module contains a reproducible Monte Carlo harness for the
//! two design-based experiments used to validate the predictors, and [`cli`]
//! implements the `mner` command-line front end.

pub mod aggregate;
pub mod cli;
pub mod data_model;
pub mod error;
pub mod io;
pub mod linalg;
pub mod mner_core;
pub mod optim;
pub mod predictors;
pub mod reml;
pub mod rng;
pub mod simulation;
#[cfg(test)]
pub(crate) mod test_util;
pub mod uncertainty;

pub use data_model::{
    AreaPrediction, AuxRecord, Dataset, EstimatorKind, FittedModel, LinearCombination, MseSource,
    UnitRecord, VarianceComponents,
};
pub use error::{Error, Result};
