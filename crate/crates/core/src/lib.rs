//! Semi-supervised 3D segmentation: autoencoder pre-training, consistency
//! regularization and pseudo-labeling for an encoder-decoder network with a
//! state-space bottleneck, plus tiled inference and evaluation metrics.

pub mod corruption;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod perturbation;
pub mod pipeline;
pub mod sweep;
pub mod trainer;
pub mod volumes;

pub use error::{Error, Result};
