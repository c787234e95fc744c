//! Estimation and validation of concave multi-asset price-impact propagators.
//!
//! The crate is organised along the data flow of an estimation run:
//!
//! * [`market_data`] loads binned episodes and normalizes returns and volumes.
//! * [`impact`] holds kernels, impact functions, the execution-cost functional,
//!   admissibility checks and parametric kernel families.
//! * [`manipulation`] builds round-trip schedules with negative cost for
//!   nonlinear impact functions.
//! * [`estimator`] accumulates the regularized normal equations and solves the
//!   ridge problem, including the high-probability confidence radius.
//! * [`projection`] projects a raw estimate onto the admissible cone in the
//!   Gram metric.
//! * [`proxy`] turns tick streams into synthetic metaorders.
//! * [`simulator`] generates data from a known ground truth.
//! * [`evaluation`] fits parametric baselines and scores models by R².

pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod impact;
pub mod kernel;
pub mod linalg;
pub mod manipulation;
pub mod market_data;
pub mod projection;
pub mod proxy;
pub mod simulator;

pub use error::{Error, Result};
pub use kernel::KernelTensor;
