use std::path::Path;

use serde::Deserialize;

use crate::data::{check_header, csv_error, open_csv, ZoneGraph};
use crate::error::{PagError, Result};
use crate::tensor::Tensor;

pub const OCCUPANCY: usize = 0;
pub const PRICE: usize = 1;
pub const NUM_FEATURES: usize = 2;

/// Dense `zones x features x timestamps` panel of occupancy and price.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePanel {
    values: Tensor,
    start: i64,
}

impl FeaturePanel {
    /// Wraps a `[N, 2, T]` tensor after checking value ranges.
    pub fn new(values: Tensor, start: i64) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[1] != NUM_FEATURES {
            return Err(PagError::Panel(format!("expected [N, 2, T], got {s:?}")));
        }
        let panel = FeaturePanel { values, start };
        for i in 0..panel.num_zones() {
            for t in 0..panel.len() {
                let o = panel.occupancy(i, t);
                if !(0.0..=1.0).contains(&o) {
                    return Err(PagError::Panel(format!(
                        "occupancy {o} outside [0,1] at zone {i}, t {}",
                        panel.timestamp(t)
                    )));
                }
                let p = panel.price(i, t);
                if !(p > 0.0 && p.is_finite()) {
                    return Err(PagError::Panel(format!(
                        "non-positive price {p} at zone {i}, t {}",
                        panel.timestamp(t)
                    )));
                }
            }
        }
        Ok(panel)
    }

    /// Builds a panel without range checks; used for normalised copies.
    pub(crate) fn from_raw(values: Tensor, start: i64) -> Self {
        FeaturePanel { values, start }
    }

    pub fn num_zones(&self) -> usize {
        self.values.shape()[0]
    }

    /// Number of timestamps.
    pub fn len(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Integer timestamp of local index `t`.
    pub fn timestamp(&self, t: usize) -> i64 {
        self.start + t as i64
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn get(&self, zone: usize, feature: usize, t: usize) -> f64 {
        let n_t = self.len();
        self.values.data()[(zone * NUM_FEATURES + feature) * n_t + t]
    }

    pub fn set(&mut self, zone: usize, feature: usize, t: usize, value: f64) {
        let n_t = self.len();
        self.values.data_mut()[(zone * NUM_FEATURES + feature) * n_t + t] = value;
    }

    pub fn occupancy(&self, zone: usize, t: usize) -> f64 {
        self.get(zone, OCCUPANCY, t)
    }

    pub fn price(&self, zone: usize, t: usize) -> f64 {
        self.get(zone, PRICE, t)
    }

    /// Series of one feature for one zone.
    pub fn series(&self, zone: usize, feature: usize) -> &[f64] {
        let n_t = self.len();
        let k = (zone * NUM_FEATURES + feature) * n_t;
        &self.values.data()[k..k + n_t]
    }

    /// Contiguous time range `[from, from + len)`.
    pub fn segment(&self, from: usize, len: usize) -> FeaturePanel {
        assert!(from + len <= self.len() && len > 0, "segment out of range");
        let n = self.num_zones();
        let mut data = Vec::with_capacity(n * NUM_FEATURES * len);
        for z in 0..n {
            for f in 0..NUM_FEATURES {
                data.extend_from_slice(&self.series(z, f)[from..from + len]);
            }
        }
        FeaturePanel {
            values: Tensor::new(vec![n, NUM_FEATURES, len], data).expect("segment shape"),
            start: self.timestamp(from),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["timestamp", "zone_id", "occupancy", "price"])
            .map_err(|e| csv_error(path, e))?;
        for t in 0..self.len() {
            for z in 0..self.num_zones() {
                w.write_record([
                    self.timestamp(t).to_string(),
                    z.to_string(),
                    self.occupancy(z, t).to_string(),
                    self.price(z, t).to_string(),
                ])
                .map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().map_err(|e| PagError::io(path, e))
    }
}

#[derive(Deserialize)]
struct Row {
    timestamp: i64,
    zone_id: usize,
    occupancy: f64,
    price: f64,
}

/// Reads `timestamp,zone_id,occupancy,price`. Rows must be ordered by
/// timestamp, timestamps must be consecutive integers, and every
/// `(timestamp, zone)` cell must appear exactly once.
pub fn load_panel(path: &Path, graph: &ZoneGraph) -> Result<FeaturePanel> {
    let mut reader = open_csv(path)?;
    check_header(path, &mut reader, &["timestamp", "zone_id", "occupancy", "price"])?;
    let n = graph.num_zones();
    let mut start: Option<i64> = None;
    let mut last = i64::MIN;
    // cells[t][zone] = (occupancy, price)
    let mut cells: Vec<Vec<Option<(f64, f64)>>> = Vec::new();
    for (line, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        if row.timestamp < last {
            return Err(csv_error(
                path,
                format!("timestamps not monotone at data row {}", line + 1),
            ));
        }
        if row.zone_id >= n {
            return Err(csv_error(path, format!("unknown zone {}", row.zone_id)));
        }
        let t0 = *start.get_or_insert(row.timestamp);
        if row.timestamp > last && last != i64::MIN && row.timestamp != last + 1 {
            return Err(csv_error(
                path,
                format!("gap between timestamps {last} and {}", row.timestamp),
            ));
        }
        last = row.timestamp;
        let t = (row.timestamp - t0) as usize;
        if t == cells.len() {
            cells.push(vec![None; n]);
        }
        if !(0.0..=1.0).contains(&row.occupancy) {
            return Err(csv_error(
                path,
                format!(
                    "occupancy {} outside [0,1] at timestamp {}, zone {}",
                    row.occupancy, row.timestamp, row.zone_id
                ),
            ));
        }
        let slot = &mut cells[t][row.zone_id];
        if slot.is_some() {
            return Err(csv_error(
                path,
                format!("duplicate cell (timestamp {}, zone {})", row.timestamp, row.zone_id),
            ));
        }
        *slot = Some((row.occupancy, row.price));
    }
    let start = start.ok_or_else(|| csv_error(path, "no rows"))?;
    let n_t = cells.len();
    let mut values = Tensor::zeros(&[n, NUM_FEATURES, n_t]);
    for (t, row) in cells.iter().enumerate() {
        for (z, cell) in row.iter().enumerate() {
            let (o, p) = cell.ok_or_else(|| {
                csv_error(
                    path,
                    format!("missing cell (timestamp {}, zone {z})", start + t as i64),
                )
            })?;
            values.set(&[z, OCCUPANCY, t], o);
            values.set(&[z, PRICE, t], p);
        }
    }
    FeaturePanel::new(values, start).map_err(|e| csv_error(path, e))
}
