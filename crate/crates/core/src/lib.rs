//! Smooth periodic Gaussian copula models for multivariate periodic time
//! series.
//!
//! The model maps readings `y_t` to IID standard normal vectors in three
//! invertible steps:
//!
//! 1. a per-system, phase-dependent piecewise-linear marginal transform built
//!    from smooth periodic quantile curves ([`quantile_model`],
//!    [`marginal_transform`]),
//! 2. a constant-coefficient vector autoregression ([`ar_model`]),
//! 3. a smooth periodic Gaussian fit to the autoregression residual, used to
//!    whiten it ([`residual_model`]).
//!
//! The fitted latent process is a Gaussian with block-banded precision, which
//! makes simulation, imputation, anomaly detection and forecasting a matter
//! of linear algebra ([`joint_gaussian`], [`applications`]). Fitting and model
//! files live in [`pipeline`].

pub mod applications;
pub mod ar_model;
pub mod error;
pub mod fleet_data;
pub mod joint_gaussian;
pub mod marginal_transform;
pub mod periodic;
pub mod pipeline;
pub mod quantile_model;
pub mod residual_model;
pub mod synthetic;

pub use error::{Error, Result};
