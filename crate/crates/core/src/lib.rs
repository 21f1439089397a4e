//! Expectation propagation line spectral estimation.
//!
//! Jointly estimates the frequencies, complex amplitudes, model order and
//! noise variance of a sum of complex sinusoids observed through a
//! componentwise channel (additive Gaussian noise, a subset of rows, or a
//! uniform quantizer). Frequencies are carried as von Mises messages and
//! amplitudes as complex Gaussian messages on a factor graph; a
//! Bernoulli-Gaussian prior with EM-learned hyperparameters decides which
//! of the `N` candidate components are active.
//!
//! The crate is organised bottom-up:
//!
//! * [`circular`]: von Mises messages, Bessel ratios and Laplace projection.
//! * [`bgprior`]: Bernoulli-Gaussian posterior and EM prior updates.
//! * [`channels`]: measurement likelihoods and the uniform quantizer.
//! * [`engine`]: the message-passing scheduler.
//! * [`init`]: periodogram-based warm start.
//! * [`scene`]: synthetic test scenes.
//! * [`metrics`]: reconstruction and frequency error metrics.
//! * [`harness`]: Monte-Carlo sweeps and CSV output.

pub mod bgprior;
pub mod channels;
pub mod circular;
pub mod engine;
mod error;
pub mod harness;
pub mod init;
pub mod metrics;
pub mod scene;
pub mod special;

pub use error::{Error, Result};
pub use num_complex::Complex64;

/// Lower clamp applied to every Gaussian variance.
pub const VAR_MIN: f64 = 1e-16;
/// Upper clamp for Gaussian variances; a message at this variance is
/// effectively uninformative.
pub const VAR_MAX: f64 = 1e10;
