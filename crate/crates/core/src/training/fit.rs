use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{value_and_grad, Mask};
use crate::data::{NormalizationStats, SampleWindow};
use crate::error::{PagError, Result};
use crate::exec::{map_ordered, Execution};
use crate::model::{predict_with, ModelConfig, PagModel};
use crate::params::ModelParams;
use crate::piml::mix_real_samples;
use crate::training::adam::Adam;
use crate::training::metrics::{compute_metrics, MetricReport};

/// Supervised fitting hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Forecast horizon in steps.
    pub horizon: usize,
    /// Keep every `window_stride`-th window of each split.
    pub window_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            max_epochs: 1000,
            patience: 100,
            learning_rate: 0.001,
            weight_decay: 0.00001,
            seed: 2023,
            horizon: 6,
            window_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.horizon == 0 || self.window_stride == 0 {
            return Err(PagError::Config(
                "batch_size, horizon and window_stride must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return Err(PagError::Config("learning_rate and weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Tracks the best validation loss and the parameters that achieved it.
#[derive(Clone, Debug)]
pub struct EarlyStopState {
    pub best_loss: f64,
    pub best_epoch: usize,
    pub since_improvement: usize,
    pub best_params: ModelParams,
}

impl EarlyStopState {
    pub fn new(params: &ModelParams) -> Self {
        EarlyStopState {
            best_loss: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
            best_params: params.clone(),
        }
    }

    /// Records an epoch; returns `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64, params: &ModelParams, patience: usize) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            self.best_params = params.clone();
            false
        } else {
            self.since_improvement += 1;
            self.since_improvement >= patience.max(1)
        }
    }
}

/// Summed loss and summed gradient over `windows`. Per-window graphs run
/// under `exec`; the reduction is sequential in window order.
pub fn batch_gradient(
    config: &ModelConfig,
    params: &ModelParams,
    windows: &[&SampleWindow],
    mask: &Arc<Mask>,
    exec: Execution,
) -> Result<(f64, ModelParams)> {
    let parts = map_ordered(exec, windows, |w| {
        value_and_grad(params, |g, p| PagModel::sample_loss(config, g, p, w, mask))
    });
    let mut loss = 0.0;
    let mut grad = params.zeros_like();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grad.axpy(1.0, &g);
    }
    Ok((loss, grad))
}

/// Mean per-window loss over `windows`.
pub fn mean_loss(
    config: &ModelConfig,
    params: &ModelParams,
    windows: &[SampleWindow],
    mask: &Arc<Mask>,
    exec: Execution,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(PagError::Config("no windows to evaluate".into()));
    }
    let parts = map_ordered(exec, windows, |w| {
        crate::autodiff::value_only(params, |g, p| PagModel::sample_loss(config, g, p, w, mask))
    });
    let mut total = 0.0;
    for part in parts {
        total += part?;
    }
    Ok(total / windows.len() as f64)
}

/// Mini-batch Adam on normalised windows with early stopping on validation
/// loss. On return `model` holds the best-validation parameters.
pub fn fit(
    model: &mut PagModel,
    train: &[SampleWindow],
    validation: &[SampleWindow],
    cfg: &TrainConfig,
    mask: &Arc<Mask>,
    exec: Execution,
) -> Result<FitReport> {
    fit_mixed(model, train, None, validation, cfg, mask, exec)
}

/// Law-generated counterparts of the training windows (same order) and the
/// share of them to use in each epoch.
pub struct TuningMix<'a> {
    pub tuned: &'a [SampleWindow],
    pub share: &'a dyn Fn(usize) -> f64,
}

/// [`fit`] where each epoch replaces a `share(epoch)` fraction of the
/// training windows with their tuned counterparts.
pub fn fit_mixed(
    model: &mut PagModel,
    train: &[SampleWindow],
    mix: Option<TuningMix<'_>>,
    validation: &[SampleWindow],
    cfg: &TrainConfig,
    mask: &Arc<Mask>,
    exec: Execution,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(PagError::Config("training and validation windows must be nonempty".into()));
    }
    if let Some(m) = &mix {
        if m.tuned.len() != train.len() {
            return Err(PagError::Config(format!(
                "{} tuned windows for {} training windows",
                m.tuned.len(),
                train.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.params, cfg.learning_rate, cfg.weight_decay);
    let mut stop = EarlyStopState::new(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let samples: Vec<&SampleWindow> = match &mix {
            Some(m) => mix_real_samples(m.tuned, train, (m.share)(epoch), 0, &mut rng),
            None => train.iter().collect(),
        };
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SampleWindow> = chunk.iter().map(|&i| samples[i]).collect();
            let (loss, mut grad) = batch_gradient(&model.config, &model.params, &batch, mask, exec)?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(PagError::Diverged(format!("non-finite training loss at epoch {epoch}")));
            }
            grad.scale(1.0 / batch.len() as f64);
            opt.step(&mut model.params, &grad);
            epoch_loss += loss;
        }
        let val_loss = mean_loss(&model.config, &model.params, validation, mask, exec)?;
        if !val_loss.is_finite() {
            return Err(PagError::Diverged(format!("non-finite validation loss at epoch {epoch}")));
        }
        history.push(EpochLoss {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
        });
        if stop.observe(epoch, val_loss, &model.params, cfg.patience) {
            break;
        }
    }
    model.params = stop.best_params;
    Ok(FitReport {
        history,
        best_epoch: stop.best_epoch,
        best_val_loss: stop.best_loss,
    })
}

/// Denormalised forecasts for each window, `[window][zone]`.
pub fn predict_windows(
    model: &PagModel,
    windows: &[SampleWindow],
    stats: &NormalizationStats,
    mask: &Arc<Mask>,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    map_ordered(exec, windows, |w| {
        predict_with(&model.config, &model.params, &w.input, mask).map(|p| stats.denormalize_occupancy(&p))
    })
    .into_iter()
    .collect()
}

/// Metrics of `model` on normalised test windows, on the occupancy scale.
pub fn evaluate(
    model: &PagModel,
    windows: &[SampleWindow],
    stats: &NormalizationStats,
    mask: &Arc<Mask>,
    exec: Execution,
) -> Result<MetricReport> {
    if windows.is_empty() {
        return Err(PagError::Metric("no test windows".into()));
    }
    let preds = predict_windows(model, windows, stats, mask, exec)?;
    let targets: Vec<Vec<f64>> = windows.iter().map(|w| stats.denormalize_occupancy(&w.target)).collect();
    compute_metrics(windows[0].horizon, &preds, &targets)
}

pub fn write_history_csv(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::data::csv_error(path, e))?;
    let rows = std::iter::once(["epoch".to_string(), "train_loss".into(), "val_loss".into()])
        .chain(history.iter().map(|h| [h.epoch.to_string(), h.train_loss.to_string(), h.val_loss.to_string()]));
    for row in rows {
        w.write_record(&row).map_err(|e| crate::data::csv_error(path, e))?;
    }
    w.flush().map_err(|e| PagError::io(path, e))
}

pub fn write_metrics_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::data::csv_error(path, e))?;
    w.write_record(["horizon", "rmse", "mape", "rae", "mae"])
        .map_err(|e| crate::data::csv_error(path, e))?;
    for r in reports {
        w.write_record([
            r.horizon.to_string(),
            r.rmse.to_string(),
            r.mape.to_string(),
            r.rae.to_string(),
            r.mae.to_string(),
        ])
        .map_err(|e| crate::data::csv_error(path, e))?;
    }
    w.flush().map_err(|e| PagError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic(x: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::vector(vec![x]));
        p
    }

    #[test]
    fn patience_zero_stops_on_first_regression() {
        let p = quadratic(0.0);
        let mut s = EarlyStopState::new(&p);
        assert!(!s.observe(0, 1.0, &p, 0));
        assert!(!s.observe(1, 0.5, &quadratic(1.0), 0));
        assert!(s.observe(2, 0.7, &quadratic(2.0), 0));
        assert_eq!(s.best_params, quadratic(1.0));
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn patience_counts_consecutive_epochs() {
        let p = quadratic(0.0);
        let mut s = EarlyStopState::new(&p);
        s.observe(0, 1.0, &p, 3);
        assert!(!s.observe(1, 2.0, &p, 3));
        assert!(!s.observe(2, 2.0, &p, 3));
        assert!(s.observe(3, 2.0, &p, 3));
    }
}
