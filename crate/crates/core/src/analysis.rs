//! Counterfactual price probing of a trained model and hop-wise summaries.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mask;
use crate::data::{NormalizationStats, SampleWindow, ZoneGraph, PRICE};
use crate::error::{PagError, Result};
use crate::exec::{map_ordered, Execution};
use crate::model::{predict_with, PagModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpulseKind {
    /// Additive impulse of `magnitude` training-price standard deviations.
    Std,
    /// Relative impulse: price scaled by `1 + magnitude`.
    #[default]
    Percentile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImpulseSpec {
    pub kind: ImpulseKind,
    pub magnitudes: Vec<f64>,
    /// Zones to perturb; empty means every zone.
    pub zones: Vec<usize>,
    /// Probe at most this many test windows, evenly spaced; 0 means all.
    pub max_windows: usize,
}

impl Default for ImpulseSpec {
    fn default() -> Self {
        ImpulseSpec {
            kind: ImpulseKind::Percentile,
            magnitudes: vec![-0.3, -0.2, -0.1, 0.1, 0.2, 0.3],
            zones: Vec::new(),
            max_windows: 48,
        }
    }
}

impl ImpulseSpec {
    pub fn std_pair() -> Self {
        ImpulseSpec {
            kind: ImpulseKind::Std,
            magnitudes: vec![-1.0, 1.0],
            ..ImpulseSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.magnitudes.iter().any(|m| !m.is_finite()) {
            return Err(PagError::Config("impulse magnitudes must be finite".into()));
        }
        if self.kind == ImpulseKind::Percentile && self.magnitudes.iter().any(|&m| m <= -1.0) {
            return Err(PagError::Config("relative impulses must keep prices positive".into()));
        }
        Ok(())
    }
}

/// Mean prediction change (occupancy scale) for one zone and magnitude,
/// averaged over probed windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub zone: usize,
    pub magnitude: f64,
    pub local: f64,
    /// Mean over 1-hop zones; `None` when there are none.
    pub hop1: Option<f64>,
    pub hop2: Option<f64>,
    /// `local / base prediction`.
    pub relative: f64,
    /// `relative / (dp / p)`, the implied elasticity.
    pub elasticity: f64,
}

impl ResponseRecord {
    pub fn hop(&self, hop: usize) -> Option<f64> {
        match hop {
            0 => Some(self.local),
            1 => self.hop1,
            2 => self.hop2,
            _ => None,
        }
    }
}

/// Perturbs the price channel of `zone` over the whole window (original scale).
pub fn perturb_price(raw: &SampleWindow, zone: usize, kind: ImpulseKind, magnitude: f64, price_std: f64) -> SampleWindow {
    let mut w = raw.clone();
    for step in 0..raw.window_len() {
        let p = raw.feature(zone, PRICE, step);
        let q = match kind {
            ImpulseKind::Percentile => p * (1.0 + magnitude),
            ImpulseKind::Std => (p + magnitude * price_std).max(1e-9),
        };
        w.set_feature(zone, PRICE, step, q);
    }
    w
}

fn evenly_spaced<T>(items: &[T], max: usize) -> Vec<&T> {
    if max == 0 || items.len() <= max {
        return items.iter().collect();
    }
    (0..max).map(|k| &items[k * items.len() / max]).collect()
}

/// Probes `model` with price impulses on raw (original-scale) windows. The
/// windows are never modified; each probe perturbs a copy.
pub fn impulse_response(
    model: &PagModel,
    raw_windows: &[SampleWindow],
    graph: &ZoneGraph,
    stats: &NormalizationStats,
    spec: &ImpulseSpec,
    mask: &Arc<Mask>,
    exec: Execution,
) -> Result<Vec<ResponseRecord>> {
    spec.validate()?;
    let n = graph.num_zones();
    if let Some(&z) = spec.zones.iter().find(|&&z| z >= n) {
        return Err(PagError::Graph(format!("impulse zone {z} not in a {n}-zone graph")));
    }
    let zones: Vec<usize> = if spec.zones.is_empty() { (0..n).collect() } else { spec.zones.clone() };
    let windows = evenly_spaced(raw_windows, spec.max_windows);
    if windows.is_empty() {
        return Err(PagError::Config("no windows to probe".into()));
    }
    let predict = |w: &SampleWindow| -> Result<Vec<f64>> {
        let norm = stats.normalize_window(w);
        predict_with(&model.config, &model.params, &norm.input, mask).map(|p| stats.denormalize_occupancy(&p))
    };
    let base: Vec<Vec<f64>> = map_ordered(exec, &windows, |w| predict(w)).into_iter().collect::<Result<_>>()?;

    let cells: Vec<(usize, f64)> = zones
        .iter()
        .flat_map(|&z| spec.magnitudes.iter().map(move |&m| (z, m)))
        .collect();
    let hops: Vec<Vec<Option<usize>>> = (0..n).map(|z| graph.hop_distances(z)).collect();
    let results = map_ordered(exec, &cells, |&(zone, magnitude)| -> Result<ResponseRecord> {
        let price_std = stats.std[zone][PRICE];
        let mut delta = vec![0.0; n];
        let mut relative = 0.0;
        let mut rel_price = 0.0;
        for (w, b) in windows.iter().zip(&base) {
            let pert = perturb_price(w, zone, spec.kind, magnitude, price_std);
            let y = predict(&pert)?;
            for k in 0..n {
                delta[k] += y[k] - b[k];
            }
            relative += (y[zone] - b[zone]) / b[zone].abs().max(crate::training::MAPE_EPS);
            let last = w.window_len() - 1;
            rel_price += pert.feature(zone, PRICE, last) / w.feature(zone, PRICE, last) - 1.0;
        }
        let count = windows.len() as f64;
        delta.iter_mut().for_each(|d| *d /= count);
        let hop_mean = |h: usize| {
            let members: Vec<f64> = (0..n).filter(|&k| hops[zone][k] == Some(h)).map(|k| delta[k]).collect();
            (!members.is_empty()).then(|| members.iter().sum::<f64>() / members.len() as f64)
        };
        let relative = relative / count;
        let rel_price = rel_price / count;
        Ok(ResponseRecord {
            zone,
            magnitude,
            local: delta[zone],
            hop1: hop_mean(1),
            hop2: hop_mean(2),
            relative,
            elasticity: if rel_price == 0.0 { 0.0 } else { relative / rel_price },
        })
    });
    results.into_iter().collect()
}

/// Mean signed response at one hop for one impulse magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopSummary {
    pub magnitude: f64,
    pub hop: usize,
    pub mean: f64,
    pub mean_abs: f64,
    pub count: usize,
}

/// Per magnitude and hop 0..=2, the mean response over records that have
/// zones at that hop. Hops without any zone are omitted.
pub fn spillover_by_hop(records: &[ResponseRecord]) -> Vec<HopSummary> {
    let mut magnitudes: Vec<f64> = records.iter().map(|r| r.magnitude).collect();
    magnitudes.sort_by(f64::total_cmp);
    magnitudes.dedup();
    let mut out = Vec::new();
    for m in magnitudes {
        for hop in 0..=2 {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.magnitude == m)
                .filter_map(|r| r.hop(hop))
                .collect();
            if vals.is_empty() {
                continue;
            }
            let c = vals.len() as f64;
            out.push(HopSummary {
                magnitude: m,
                hop,
                mean: vals.iter().sum::<f64>() / c,
                mean_abs: vals.iter().map(|v| v.abs()).sum::<f64>() / c,
                count: vals.len(),
            });
        }
    }
    out
}

/// Share of records whose local response has the opposite sign to the impulse.
pub fn negative_sign_rate(records: &[ResponseRecord]) -> f64 {
    let cells: Vec<&ResponseRecord> = records.iter().filter(|r| r.magnitude != 0.0).collect();
    if cells.is_empty() {
        return 0.0;
    }
    let hits = cells.iter().filter(|r| r.local * r.magnitude < 0.0).count();
    hits as f64 / cells.len() as f64
}

/// `zone,hop,magnitude,delta,relative,elasticity`, one row per available hop.
pub fn write_responses_csv(path: &Path, records: &[ResponseRecord]) -> Result<()> {
    let err = |e: csv::Error| crate::data::csv_error(path, e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["zone", "hop", "magnitude", "delta", "relative", "elasticity"])
        .map_err(err)?;
    for r in records {
        for hop in 0..=2 {
            let Some(delta) = r.hop(hop) else { continue };
            let (rel, el) = if hop == 0 {
                (r.relative.to_string(), r.elasticity.to_string())
            } else {
                (String::new(), String::new())
            };
            w.write_record([r.zone.to_string(), hop.to_string(), r.magnitude.to_string(), delta.to_string(), rel, el])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| PagError::io(path, e))
}
