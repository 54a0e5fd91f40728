use serde::{Deserialize, Serialize};

use crate::data::{FeaturePanel, SampleWindow, NUM_FEATURES, OCCUPANCY};
use crate::error::{PagError, Result};
use crate::tensor::Tensor;

/// Per-zone, per-feature z-score parameters, fitted on the training segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    /// `mean[zone][feature]`
    pub mean: Vec<[f64; NUM_FEATURES]>,
    pub std: Vec<[f64; NUM_FEATURES]>,
}

/// Standard deviations below this are treated as a constant series.
const MIN_STD: f64 = 1e-9;

impl NormalizationStats {
    /// Population mean and standard deviation of every series in `train`.
    pub fn fit(train: &FeaturePanel) -> Result<Self> {
        let n = train.num_zones();
        let mut mean = vec![[0.0; NUM_FEATURES]; n];
        let mut std = vec![[0.0; NUM_FEATURES]; n];
        for z in 0..n {
            for f in 0..NUM_FEATURES {
                let s = train.series(z, f);
                let m = s.iter().sum::<f64>() / s.len() as f64;
                let var = s.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / s.len() as f64;
                let sd = var.sqrt();
                if !(sd > MIN_STD) {
                    let what = if f == OCCUPANCY { "occupancy" } else { "price" };
                    return Err(PagError::Degenerate(format!(
                        "zone {z} has constant {what} on the training segment"
                    )));
                }
                mean[z][f] = m;
                std[z][f] = sd;
            }
        }
        Ok(NormalizationStats { mean, std })
    }

    pub fn num_zones(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize_value(&self, zone: usize, feature: usize, x: f64) -> f64 {
        (x - self.mean[zone][feature]) / self.std[zone][feature]
    }

    pub fn denormalize_value(&self, zone: usize, feature: usize, z: f64) -> f64 {
        z * self.std[zone][feature] + self.mean[zone][feature]
    }

    pub fn normalize_panel(&self, panel: &FeaturePanel) -> FeaturePanel {
        let (n, t) = (panel.num_zones(), panel.len());
        let values = Tensor::from_fn(&[n, NUM_FEATURES, t], |k| {
            let z = k / (NUM_FEATURES * t);
            let f = (k / t) % NUM_FEATURES;
            self.normalize_value(z, f, panel.values().data()[k])
        });
        FeaturePanel::from_raw(values, panel.start())
    }

    pub fn denormalize_panel(&self, panel: &FeaturePanel) -> FeaturePanel {
        let (n, t) = (panel.num_zones(), panel.len());
        let values = Tensor::from_fn(&[n, NUM_FEATURES, t], |k| {
            let z = k / (NUM_FEATURES * t);
            let f = (k / t) % NUM_FEATURES;
            self.denormalize_value(z, f, panel.values().data()[k])
        });
        FeaturePanel::from_raw(values, panel.start())
    }

    /// Z-scores inputs per zone and feature, and targets with occupancy statistics.
    pub fn normalize_window(&self, w: &SampleWindow) -> SampleWindow {
        let (n, len) = (w.num_zones(), w.window_len());
        let input = Tensor::from_fn(&[n, NUM_FEATURES, len], |k| {
            let z = k / (NUM_FEATURES * len);
            let f = (k / len) % NUM_FEATURES;
            self.normalize_value(z, f, w.input.data()[k])
        });
        SampleWindow {
            input_start: w.input_start,
            horizon: w.horizon,
            input,
            target: self.normalize_occupancy(&w.target),
        }
    }

    pub fn normalize_occupancy(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(z, &x)| self.normalize_value(z, OCCUPANCY, x))
            .collect()
    }

    /// Maps per-zone normalised occupancy back to the `[0, 1]` scale.
    pub fn denormalize_occupancy(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(z, &x)| self.denormalize_value(z, OCCUPANCY, x))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_windows, chronological_split, PRICE};

    fn noisy_panel() -> FeaturePanel {
        let t = 50;
        let v = Tensor::from_fn(&[2, NUM_FEATURES, t], |k| {
            let step = (k % t) as f64;
            let f = (k / t) % NUM_FEATURES;
            let noise = ((k * 7919) % 97) as f64 / 970.0;
            if f == OCCUPANCY {
                0.4 + noise
            } else {
                1.2 + 0.01 * step + noise
            }
        });
        FeaturePanel::new(v, 0).unwrap()
    }

    #[test]
    fn roundtrip_is_exact_to_1e12() {
        let p = noisy_panel();
        let stats = NormalizationStats::fit(&p).unwrap();
        let back = stats.denormalize_panel(&stats.normalize_panel(&p));
        for (a, b) in p.values().data().iter().zip(back.values().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_come_from_train_only() {
        let p = noisy_panel();
        let split = chronological_split(&p, [6, 2, 2], 5).unwrap();
        let stats = NormalizationStats::fit(&split.train).unwrap();
        let s = split.train.series(1, PRICE);
        let m = s.iter().sum::<f64>() / s.len() as f64;
        assert!((stats.mean[1][PRICE] - m).abs() < 1e-12);
        let full = p.series(1, PRICE);
        let full_mean = full.iter().sum::<f64>() / full.len() as f64;
        assert!((stats.mean[1][PRICE] - full_mean).abs() > 1e-3);

        let test_windows = build_windows(&split.test, 3, 1).unwrap();
        let nw = stats.normalize_window(&test_windows[0]);
        let raw = test_windows[0].feature(1, PRICE, 0);
        assert!((nw.feature(1, PRICE, 0) - (raw - m) / stats.std[1][PRICE]).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_price_rejected() {
        let t = 10;
        let v = Tensor::from_fn(&[1, NUM_FEATURES, t], |k| {
            if k / t == 0 {
                0.1 * (k % t) as f64
            } else {
                1.5
            }
        });
        let p = FeaturePanel::new(v, 0).unwrap();
        let err = NormalizationStats::fit(&p).unwrap_err();
        assert!(err.to_string().contains("constant price"), "{err}");
    }
}
