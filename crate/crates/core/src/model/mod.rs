//! The detector: configuration, parameters, forward pass, loss, decoding
//! and training.

pub mod check;
pub mod config;
pub mod decode;
pub mod loss;
pub mod network;
pub mod params;
pub mod train;

pub use config::{CoarseEncoding, LossWeights, ModelConfig, CLASSES, HEAD_FIELDS};
pub use decode::Prediction;
pub use network::{forward, Forward, Geometry};
pub use params::{Bound, Params};
pub use train::{predict, predict_all, train, TrainConfig, TrainState};
