//! Self-normalized structural-break tests for predictive quantile and
//! CoVaR regressions.

pub mod covar;
pub mod data;
pub mod dgp;
pub mod error;
pub mod limit_sim;
pub mod linalg;
pub mod regression;
pub mod sn;

pub use data::Dataset;
pub use error::{Error, Result};
