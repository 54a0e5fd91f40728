//! Supervised fitting, optimizer and forecast metrics.

mod adam;
mod fit;
mod metrics;

pub use adam::Adam;
pub use fit::{
    batch_gradient, evaluate, fit, mean_loss, predict_windows, write_history_csv, write_metrics_csv,
    fit_mixed, EarlyStopState, EpochLoss, FitReport, TrainConfig, TuningMix,
};
pub use metrics::{compute_metrics, MetricReport, MAPE_EPS};
