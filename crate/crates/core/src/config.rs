//! Experiment configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::ImpulseSpec;
use crate::error::{PagError, Result};
use crate::exec::Execution;
use crate::model::ModelConfig;
use crate::piml::{ElasticityLaw, MetaConfig};
use crate::synth::MarketSpec;
use crate::training::TrainConfig;

/// Locations of the three dataset CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub timeseries: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths::in_dir(Path::new("data"))
    }
}

impl DataPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DataPaths {
            nodes: dir.join("nodes.csv"),
            edges: dir.join("edges.csv"),
            timeseries: dir.join("timeseries.csv"),
        }
    }

    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.nodes, &mut self.edges, &mut self.timeseries] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// The whole experiment. The top-level `seed` governs every random choice:
/// it replaces `market.seed` and `train.seed` when the file is loaded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Forecast horizons (steps) used by `ablate`.
    pub horizons: Vec<usize>,
    pub execution: Execution,
    pub data: DataPaths,
    pub market: MarketSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub meta: MetaConfig,
    pub laws: Vec<ElasticityLaw>,
    pub impulse: ImpulseSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2023,
            output_dir: PathBuf::from("out"),
            horizons: vec![3, 6, 9, 12],
            execution: Execution::Parallel,
            data: DataPaths::default(),
            market: MarketSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            meta: MetaConfig::default(),
            laws: ElasticityLaw::defaults(),
            impulse: ImpulseSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| PagError::Config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths and output directory are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PagError::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            PagError::Config(m) => PagError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve(base);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.market.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.meta.validate()?;
        self.market.validate()?;
        self.impulse.validate()?;
        for law in &self.laws {
            law.validate()?;
        }
        if self.horizons.iter().any(|&h| h == 0) {
            return Err(PagError::Config("horizons must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the settings that determine a trained model's meaning.
    pub fn model_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            model: &'a ModelConfig,
            horizon: usize,
            window_stride: usize,
        }
        let key = Key {
            model: &self.model,
            horizon: self.train.horizon,
            window_stride: self.train.window_stride,
        };
        let bytes = serde_json::to_vec(&key).expect("config serialises");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
