//! Rank inference for time-varying spot covariance matrices.
//!
//! A continuous d-dimensional semimartingale is observed n+1 times on a
//! uniform grid of [0,1]. The library splits the observations into blocks,
//! forms realized covariance matrices per block, and tests whether the spot
//! covariance matrix has rank at most r throughout, using non-asymptotic
//! critical values. On top of the test sit a sequential rank estimator,
//! data-driven critical values calibrated from the volatility of volatility,
//! matrix concentration bound calculators, simulators for the model classes
//! used in validation, and a deterministic Monte Carlo experiment driver.
//!
//! Module map:
//! - [`specmat`]: small dense symmetric-matrix eigendecomposition and norms
//! - [`simulate`]: covariance path models and exact Gaussian samplers
//! - [`realized`]: blockwise realized covariances and derived summaries
//! - [`ranktest`]: test statistic, critical values, level-alpha test, rank estimator
//! - [`volofvol`]: vol-of-vol estimators and data-driven critical values
//! - [`concentration`]: Wishart concentration bound calculators and validators
//! - [`experiments`]: reproducible experiment harness and command line interface

pub mod concentration;
pub mod experiments;
pub mod ranktest;
pub mod realized;
pub mod simulate;
pub mod specmat;
pub mod volofvol;

/// Library error type. The command line maps `Input` (and IO/JSON) to exit
/// code 2 and `Model`/`Numerical` to exit code 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("model violation: {0}")]
    Model(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub(crate) fn model(msg: impl Into<String>) -> Self {
        Error::Model(msg.into())
    }
}
