//! Continual semi-supervised anomaly detection.
//!
//! Streams of disjoint experiences are built from image datasets, an M2-style
//! semi-supervised VAE is trained over them under one of several continual
//! learning strategies, and the negated ELBO is scored per test episode with
//! AUC-ROC.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod evt;
pub mod io;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod ssvae;
pub mod strategy;
pub mod stream;
pub mod synthetic;
pub mod train;

pub use error::{CsadError, Result};
pub use scalar::Scalar;

pub type SsVaeF32 = ssvae::SsVae<f32>;
pub type SsVaeF64 = ssvae::SsVae<f64>;
pub type StreamF32 = stream::Stream<f32>;
pub type StreamF64 = stream::Stream<f64>;
pub type StreamSetF32 = stream::StreamSet<f32>;
pub type StreamSetF64 = stream::StreamSet<f64>;
pub type RawDatasetF32 = data::RawDataset<f32>;
pub type RawDatasetF64 = data::RawDataset<f64>;
