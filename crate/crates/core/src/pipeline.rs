//! End-to-end workflow: load or synthesise data, pre-train, fine-tune,
//! evaluate, probe and ablate. The CLI subcommands are thin wrappers.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analysis::{impulse_response, ResponseRecord};
use crate::autodiff::Mask;
use crate::config::{DataPaths, ExperimentConfig};
use crate::data::{
    build_windows, chronological_split, load_graph, load_panel, FeaturePanel, NormalizationStats, SampleWindow,
    ZoneGraph,
};
use crate::error::{PagError, Result};
use crate::model::{ModelVariant, PagModel};
use crate::piml::{build_buffers, fomaml_pretrain, MetaEpoch};
use crate::synth::{generate, Market};
use crate::training::{evaluate, fit, fit_mixed, FitReport, MetricReport, TuningMix};

/// Train/validation/test proportions.
pub const SPLIT_RATIOS: [usize; 3] = [6, 2, 2];

#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: ZoneGraph,
    pub panel: FeaturePanel,
}

impl Dataset {
    pub fn load(paths: &DataPaths) -> Result<Self> {
        let graph = load_graph(&paths.nodes, &paths.edges)?;
        let panel = load_panel(&paths.timeseries, &graph)?;
        Ok(Dataset { graph, panel })
    }

    pub fn from_market(market: &Market) -> Self {
        Dataset {
            graph: market.graph.clone(),
            panel: market.panel.clone(),
        }
    }
}

/// Windows of every split for one horizon. `*_raw` are on the original
/// scale; the others are normalised with training-split statistics.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub horizon: usize,
    pub stats: NormalizationStats,
    pub mask: Arc<Mask>,
    pub train_raw: Vec<SampleWindow>,
    pub train: Vec<SampleWindow>,
    pub validation: Vec<SampleWindow>,
    pub test_raw: Vec<SampleWindow>,
    pub test: Vec<SampleWindow>,
}

fn every<T: Clone>(items: Vec<T>, stride: usize) -> Vec<T> {
    items.into_iter().step_by(stride.max(1)).collect()
}

/// Splits chronologically, fits normalisation on the training split and
/// builds windows. Training and validation windows are thinned by
/// `train.window_stride`; test windows are kept complete.
pub fn prepare(cfg: &ExperimentConfig, data: &Dataset, horizon: usize) -> Result<Prepared> {
    let w = cfg.model.window;
    let split = chronological_split(&data.panel, SPLIT_RATIOS, w + horizon)?;
    let stats = NormalizationStats::fit(&split.train)?;
    let train_raw = build_windows(&split.train, w, horizon)?;
    let val_raw = build_windows(&split.validation, w, horizon)?;
    let test_raw = build_windows(&split.test, w, horizon)?;
    let stride = cfg.train.window_stride;
    let norm = |ws: &[SampleWindow]| ws.iter().map(|x| stats.normalize_window(x)).collect::<Vec<_>>();
    let train = every(norm(&train_raw), stride);
    let validation = every(norm(&val_raw), stride);
    let test = norm(&test_raw);
    Ok(Prepared {
        horizon,
        mask: data.graph.attention_mask(),
        stats,
        train_raw,
        train,
        validation,
        test_raw,
        test,
    })
}

/// Fresh model for `variant`, initialised from the experiment seed.
pub fn init_model(cfg: &ExperimentConfig, variant: ModelVariant) -> Result<PagModel> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.variant = variant;
    PagModel::init(model_cfg, cfg.seed)
}

/// Meta-learned initial parameters for `variant` from law-based tuning buffers.
pub fn pretrain(
    cfg: &ExperimentConfig,
    data: &Dataset,
    prep: &Prepared,
    variant: ModelVariant,
) -> Result<(PagModel, Vec<MetaEpoch>)> {
    let mut model = init_model(cfg, variant)?;
    let base = every(prep.train_raw.clone(), cfg.meta.window_stride);
    let buffers = build_buffers(&base, &data.graph, &cfg.laws, &prep.stats, cfg.seed)?;
    let history = fomaml_pretrain(&model.config, &mut model.params, &buffers, &cfg.meta, &prep.mask, cfg.execution)?;
    Ok((model, history))
}

/// Fine-tunes `model` on the training windows with early stopping. A
/// pre-trained model keeps seeing tuning samples at the continued schedule
/// share when `meta.finetune_mix` is set.
pub fn train(cfg: &ExperimentConfig, data: &Dataset, prep: &Prepared, model: &mut PagModel, pretrained: bool) -> Result<FitReport> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.horizon = prep.horizon;
    if !(pretrained && cfg.meta.finetune_mix) {
        return fit(model, &prep.train, &prep.validation, &train_cfg, &prep.mask, cfg.execution);
    }
    let tuned = tuned_training_windows(cfg, data, prep)?;
    let offset = cfg.meta.epochs;
    let share = |e: usize| cfg.meta.tuning_share(offset + e);
    let mix = TuningMix {
        tuned: &tuned,
        share: &share,
    };
    fit_mixed(model, &prep.train, Some(mix), &prep.validation, &train_cfg, &prep.mask, cfg.execution)
}

/// One tuned counterpart per (thinned) training window, cycling through the laws.
pub fn tuned_training_windows(cfg: &ExperimentConfig, data: &Dataset, prep: &Prepared) -> Result<Vec<SampleWindow>> {
    let base = every(prep.train_raw.clone(), cfg.train.window_stride);
    let buffers = build_buffers(&base, &data.graph, &cfg.laws, &prep.stats, cfg.seed.wrapping_add(1))?;
    Ok((0..base.len()).map(|i| buffers[i % buffers.len()].tuned[i].clone()).collect())
}

pub fn test_metrics(cfg: &ExperimentConfig, prep: &Prepared, model: &PagModel) -> Result<MetricReport> {
    evaluate(model, &prep.test, &prep.stats, &prep.mask, cfg.execution)
}

pub fn probe(cfg: &ExperimentConfig, data: &Dataset, prep: &Prepared, model: &PagModel) -> Result<Vec<ResponseRecord>> {
    impulse_response(model, &prep.test_raw, &data.graph, &prep.stats, &cfg.impulse, &prep.mask, cfg.execution)
}

/// Pre-train (unless `variant` is trained from scratch) then fine-tune.
pub fn pretrain_and_train(
    cfg: &ExperimentConfig,
    data: &Dataset,
    prep: &Prepared,
    variant: ModelVariant,
    pretrained: bool,
) -> Result<(PagModel, FitReport)> {
    let mut model = if pretrained {
        pretrain(cfg, data, prep, variant)?.0
    } else {
        init_model(cfg, variant)?
    };
    let report = train(cfg, data, prep, &mut model, pretrained)?;
    Ok((model, report))
}

/// A network variant in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub label: &'static str,
    pub variant: ModelVariant,
    pub pretrained: bool,
}

pub const ABLATION_VARIANTS: [AblationVariant; 4] = [
    AblationVariant {
        label: "pag",
        variant: ModelVariant::Full,
        pretrained: true,
    },
    AblationVariant {
        label: "pag_minus",
        variant: ModelVariant::Full,
        pretrained: false,
    },
    AblationVariant {
        label: "no_gat",
        variant: ModelVariant::NoGat,
        pretrained: true,
    },
    AblationVariant {
        label: "no_tpa",
        variant: ModelVariant::NoTpa,
        pretrained: true,
    },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub horizon: usize,
    pub metrics: MetricReport,
    pub val_mse: f64,
}

/// Every variant at every configured horizon, on shared splits and seeds.
pub fn ablate(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &horizon in &cfg.horizons {
        let prep = prepare(cfg, data, horizon)?;
        for v in ABLATION_VARIANTS {
            let (model, report) = pretrain_and_train(cfg, data, &prep, v.variant, v.pretrained)?;
            rows.push(AblationRow {
                variant: v.label.to_string(),
                horizon,
                metrics: test_metrics(cfg, &prep, &model)?,
                val_mse: report.best_val_loss,
            });
        }
    }
    Ok(rows)
}

/// `variant,horizon,rmse,mape,rae,mae,val_mse`.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let err = |e: csv::Error| crate::data::csv_error(path, e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["variant", "horizon", "rmse", "mape", "rae", "mae", "val_mse"])
        .map_err(err)?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.variant.clone(),
            r.horizon.to_string(),
            m.rmse.to_string(),
            m.mape.to_string(),
            m.rae.to_string(),
            m.mae.to_string(),
            r.val_mse.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| PagError::io(path, e))
}

/// Synthesises the configured market and writes its CSVs into `dir`.
pub fn synth_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Market> {
    let market = generate(&cfg.market)?;
    market.write_dir(dir)?;
    Ok(market)
}

/// Parameters plus everything needed to use them on new data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// [`ExperimentConfig::model_hash`] of the producing configuration.
    pub config_hash: String,
    pub horizon: usize,
    /// `pretrained` or `trained`.
    pub stage: String,
    pub model: PagModel,
    pub stats: NormalizationStats,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(cfg: &ExperimentConfig, prep: &Prepared, model: PagModel, stage: &str) -> Self {
        let mut keyed = cfg.clone();
        keyed.model = model.config.clone();
        keyed.train.horizon = prep.horizon;
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config_hash: keyed.model_hash(),
            horizon: prep.horizon,
            stage: stage.to_string(),
            model,
            stats: prep.stats.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| PagError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| PagError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PagError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| PagError::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(PagError::Checkpoint(format!(
                "{}: format version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.format_version
            )));
        }
        Ok(ck)
    }

    /// Rejects a checkpoint produced under different model settings.
    pub fn check_compatible(&self, cfg: &ExperimentConfig) -> Result<()> {
        let mut expected = cfg.clone();
        expected.train.horizon = self.horizon;
        expected.model.variant = self.model.config.variant;
        if expected.model_hash() != self.config_hash {
            return Err(PagError::Checkpoint(
                "checkpoint was produced with a different model configuration".into(),
            ));
        }
        Ok(())
    }
}
