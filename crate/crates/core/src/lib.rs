//! Loss-profile anomaly segmentation.
//!
//! Three small networks cooperate over a shared dense-array engine: a
//! policy-gradient patch sampler picks training patches, a reconstruction
//! autoencoder turns images into per-pixel loss profiles, and a dilated
//! convolutional predictor segments anomalies in loss-profile space. The
//! remaining modules supply image statistics, staged training, pixel-level
//! metrics, and an MVTec-style data pipeline.

pub mod conv;
mod conv_fast;
pub mod data;
pub mod dense;
pub mod error;
pub mod feat;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod scalar;

pub use dense::{DenseArray, Shape};
pub use error::{Error, Result};
pub use scalar::Scalar;
