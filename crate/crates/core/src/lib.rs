//! Extreme amodal face detection at desk scale: procedural scenes, a
//! selective coarse-to-fine transformer detector and its evaluation suite.

pub mod dataset;
pub mod error;
pub mod flops;
pub mod geometry;
pub mod grid;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod posenc;

pub use error::{Error, Result};
