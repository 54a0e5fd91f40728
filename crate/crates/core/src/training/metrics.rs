use serde::{Deserialize, Serialize};

use crate::error::{PagError, Result};

/// Forecast errors on the original occupancy scale, averaged over zones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub horizon: usize,
    pub rmse: f64,
    pub mape: f64,
    pub rae: f64,
    pub mae: f64,
}

/// Denominator floor for MAPE so near-empty zones do not explode it.
pub const MAPE_EPS: f64 = 1e-3;

/// `preds[s][z]` and `targets[s][z]` for sample `s`, zone `z`. Each metric is
/// computed per zone over samples, then averaged over zones. MAPE is a
/// fraction, not a percentage.
pub fn compute_metrics(horizon: usize, preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<MetricReport> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(PagError::Metric(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let zones = targets[0].len();
    if preds.iter().chain(targets).any(|v| v.len() != zones) {
        return Err(PagError::Metric("ragged zone vectors".into()));
    }
    let s = preds.len() as f64;
    let (mut rmse, mut mape, mut rae, mut mae) = (0.0, 0.0, 0.0, 0.0);
    for z in 0..zones {
        let mean_y = targets.iter().map(|t| t[z]).sum::<f64>() / s;
        let (mut sq, mut abs, mut pct, mut spread) = (0.0, 0.0, 0.0, 0.0);
        for (p, t) in preds.iter().zip(targets) {
            let err = p[z] - t[z];
            sq += err * err;
            abs += err.abs();
            pct += err.abs() / t[z].abs().max(MAPE_EPS);
            spread += (t[z] - mean_y).abs();
        }
        if spread == 0.0 {
            return Err(PagError::Metric(format!(
                "zone {z} has a constant target; relative absolute error undefined"
            )));
        }
        rmse += (sq / s).sqrt();
        mae += abs / s;
        mape += pct / s;
        rae += abs / spread;
    }
    let n = zones as f64;
    Ok(MetricReport {
        horizon,
        rmse: rmse / n,
        mape: mape / n,
        rae: rae / n,
        mae: mae / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let t = vec![vec![0.1, 0.5], vec![0.3, 0.2]];
        let r = compute_metrics(3, &t, &t).unwrap();
        assert_eq!((r.rmse, r.mape, r.rae, r.mae), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn closed_form_case() {
        let p = vec![vec![1.0], vec![1.0]];
        let t = vec![vec![0.0], vec![2.0]];
        let r = compute_metrics(1, &p, &t).unwrap();
        assert_eq!((r.mae, r.rmse, r.rae), (1.0, 1.0, 1.0));
        assert!((r.mape - (1.0 / MAPE_EPS + 0.5) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn constant_target_rejected() {
        let t = vec![vec![0.5], vec![0.5]];
        assert!(compute_metrics(1, &t, &t).is_err());
    }
}
