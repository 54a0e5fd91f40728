//! Spatiotemporal charging-demand forecasting with graph attention, temporal
//! pattern attention and physics-informed meta-learning pre-training.

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod model;
pub mod params;
pub mod piml;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{PagError, Result};
pub use params::{BoundParams, ModelParams};
pub use tensor::Tensor;
