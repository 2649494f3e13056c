//! Multi-scale convolutional recurrent encoder-decoder for anomaly
//! detection and diagnosis in multivariate time series.
//!
//! The pipeline turns a set of series into stacks of windowed pairwise
//! inner-product matrices ([`signature`]), learns to reconstruct them with a
//! convolutional encoder, per-layer attention ConvLSTMs and a stacked
//! transposed-convolution decoder ([`model`]), and reads anomalies, root
//! causes and severity off the reconstruction residuals ([`detect`],
//! [`eval`]).

pub mod autodiff;
pub mod config;
pub mod detect;
mod error;
pub mod eval;
pub mod exec;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod signature;
pub mod timeseries;

pub use error::{Error, Result};
pub use exec::Exec;
