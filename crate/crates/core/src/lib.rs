//! Vessel segmentation for high-resolution video frames.
//!
//! Each frame is split into four local quadrants plus a downsampled global
//! view. A shared encoder extracts five feature stages per view, optionally
//! enriched by a tiny autoregressive prior. A memory of past global features
//! feeds a cross-attention interaction between views, and a patch-level
//! weighting step decides how much each local quadrant trusts itself over
//! the global view when the two are stitched back together.

pub mod autograd;
pub mod config;
pub mod datasets;
pub mod decoder;
pub mod dwfm;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod msim;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod toyvar;
pub mod views;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::{Model, StreamState};
pub use params::ParamStore;
pub use tensor::Tensor;
