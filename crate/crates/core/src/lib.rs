//! Multimodal survival-time regression with a lite transformer over clinical
//! records and a squeeze-and-excitation 3D residual network over CT-like
//! volumes, plus the data pipeline, metrics and training protocol around it.

pub mod clinical;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
