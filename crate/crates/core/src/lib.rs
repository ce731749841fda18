//! Gated-attention multiple-instance learning for ABC/GCB subtyping of
//! diffuse large B-cell lymphoma from patch embeddings, plus tiling,
//! attention heatmaps and nuclear morphometry.

pub mod cli;
pub mod datamodel;
pub mod error;
pub mod metrics;
pub mod milnet;
pub mod morpho;
pub mod raster;
pub mod synth;
pub mod tiler;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
