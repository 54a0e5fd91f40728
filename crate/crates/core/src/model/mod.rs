//! The forecasting network: graph embedding, recurrent decoder and their assembly.

mod config;
pub mod decoder;
pub mod embedding;
mod network;

pub use config::{EmbeddingConfig, ModelConfig, ModelVariant};
pub use network::{mse, predict_with, PagModel};
