//! Multivariate probabilistic calibration for mixture-density regressors.
//!
//! This crate trains mixture-of-Gaussians probabilistic multi-output
//! regressors with differentiable pre-rank calibration regularization,
//! and diagnoses multivariate calibration through projected probability
//! integral transforms (PITs), the probabilistic calibration error
//! (PCE), reliability curves, and null-distribution significance tests.
//!
//! The pieces fit together as follows:
//!
//! * [`distributions`] — Gaussian-mixture predictive distributions:
//!   density, sampling, smoothed joint CDF, and sample-covariance PCA.
//! * [`preranks`] — scalar projections of prediction-observation pairs
//!   (marginal, location, scale, dependency, PCA, HDR, copula).
//! * [`pit`] — projected PITs in smoothed (training) and hard
//!   (evaluation) modes.
//! * [`metrics`] — PCE, its differentiable surrogate, reliability
//!   curves, null distributions, and Holm-corrected p-values.
//! * [`scoring`] — proper scoring rules (mixture NLL, energy score).
//! * [`model`] — the hypernetwork mapping inputs to mixture parameters.
//! * [`training`] — reverse-mode gradients, the regularized objective,
//!   the optimizer loop, and regularization-strength selection.
//! * [`data`] — CSV ingestion, splitting, standardization, and
//!   synthetic generators with known conditional laws.
//! * [`autodiff`] — the scalar tape everything differentiable runs on.
//!
//! A narrative guide with runnable examples lives in the `book/`
//! directory of the repository; its chapters double as doc-tests (see
//! [`book`]).

pub mod autodiff;
pub mod data;
pub mod distributions;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pit;
pub mod preranks;
pub mod scoring;
pub mod seeds;
pub mod training;

pub use error::{Error, Result};
