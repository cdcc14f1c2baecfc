//! Total-variation regularized softmax activations for segmentation networks,
//! with exact backward passes, a small encoder-decoder network, synthetic
//! cell data and evaluation tooling.

pub mod activation;
pub mod backward;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod field;
pub mod gradcheck;
pub mod grid;
pub mod metrics;
pub mod net;

pub use error::{Error, Result};
pub use field::{DualField, Field3, LabelMap, Shape};
