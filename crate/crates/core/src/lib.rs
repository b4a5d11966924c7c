//! Gaussian-prior fusion denoising.
//!
//! The crate pairs the closed-form Bayesian estimator for i.i.d. Gaussian
//! images ([`bayes`]) with three trainable CNN denoisers built on a small
//! reverse-mode autodiff engine ([`autodiff`], [`models`], [`train`]), and an
//! evaluation harness that measures them against the analytic optimum
//! ([`eval`]).

pub mod autodiff;
pub mod bayes;
pub mod error;
pub mod eval;
pub mod io;
pub mod models;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
