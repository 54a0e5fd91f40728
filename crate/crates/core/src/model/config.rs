use serde::{Deserialize, Serialize};

use crate::error::{PagError, Result};

/// Graph embedding hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    /// Number of stacked attention layers (hops of propagation).
    pub layers: usize,
    /// Attention heads averaged per layer.
    pub heads: usize,
    /// Momentum residual coefficient.
    pub beta: f64,
    pub conv_height: usize,
    pub conv_stride: usize,
    pub leaky_slope: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            layers: 2,
            heads: 4,
            beta: 0.5,
            conv_height: 2,
            conv_stride: 1,
            leaky_slope: 0.2,
        }
    }
}

/// Which parts of the network are present. `NoGat` and `NoTpa` are the
/// single-module ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    #[default]
    Full,
    /// Temporal convolution output replicated `layers` times instead of attention.
    NoGat,
    /// Last hidden state through a linear head instead of temporal pattern attention.
    NoTpa,
}

impl ModelVariant {
    pub fn label(self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::NoGat => "no_gat",
            ModelVariant::NoTpa => "no_tpa",
        }
    }
}

/// Everything needed to build the network except the zone graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embedding: EmbeddingConfig,
    /// Input window length in steps.
    pub window: usize,
    pub variant: ModelVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding: EmbeddingConfig::default(),
            window: 12,
            variant: ModelVariant::Full,
        }
    }
}

impl ModelConfig {
    /// Length of the convolved sequence fed to the recurrent decoder.
    pub fn conv_len(&self) -> usize {
        (self.window - self.embedding.conv_height) / self.embedding.conv_stride + 1
    }

    /// Width of every embedded step (`layers * features`).
    pub fn hidden(&self) -> usize {
        self.embedding.layers * crate::data::NUM_FEATURES
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.embedding;
        if e.layers == 0 || e.heads == 0 || e.conv_height == 0 || e.conv_stride == 0 {
            return Err(PagError::Config(
                "layers, heads, conv_height and conv_stride must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&e.beta) {
            return Err(PagError::Config(format!("beta {} outside [0,1]", e.beta)));
        }
        if self.window < e.conv_height {
            return Err(PagError::Config(format!(
                "window {} shorter than conv height {}",
                self.window, e.conv_height
            )));
        }
        Ok(())
    }
}
