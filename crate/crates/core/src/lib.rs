//! Convolutional crack segmentation: residual U-Nets, a frozen-base ensemble
//! with a convolutional meta-model, and the supporting training, data and
//! evaluation pipeline.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
