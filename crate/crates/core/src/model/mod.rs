//! Segmentation network: configuration, encoder-decoder and bottleneck mixer.

pub mod config;
pub mod ssm;
pub mod unet;

pub use config::{Head, ModelConfig};
pub use unet::{convert_head, FeatureMaps, UNet};
