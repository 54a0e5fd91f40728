use crate::data::{FeaturePanel, NUM_FEATURES};
use crate::error::{PagError, Result};
use crate::tensor::Tensor;

/// One supervised sample: `w` consecutive observations of every zone and the
/// occupancy of every zone `horizon` steps after the last observation.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    /// Timestamp of the first observed step.
    pub input_start: i64,
    pub horizon: usize,
    /// `[N, F, w]`.
    pub input: Tensor,
    /// Occupancy per zone at `target_time()`.
    pub target: Vec<f64>,
}

impl SampleWindow {
    pub fn window_len(&self) -> usize {
        self.input.shape()[2]
    }

    pub fn num_zones(&self) -> usize {
        self.input.shape()[0]
    }

    /// Timestamp of the last observed step.
    pub fn last_observed(&self) -> i64 {
        self.input_start + self.window_len() as i64 - 1
    }

    pub fn target_time(&self) -> i64 {
        self.last_observed() + self.horizon as i64
    }

    pub fn feature(&self, zone: usize, feature: usize, step: usize) -> f64 {
        self.input.at(&[zone, feature, step])
    }

    pub fn set_feature(&mut self, zone: usize, feature: usize, step: usize, value: f64) {
        self.input.set(&[zone, feature, step], value);
    }
}

/// Every window of a segment, in time order. Yields
/// `len - w - horizon + 1` windows when the segment is long enough.
pub fn build_windows(segment: &FeaturePanel, w: usize, horizon: usize) -> Result<Vec<SampleWindow>> {
    if w == 0 || horizon == 0 {
        return Err(PagError::Config(format!(
            "window ({w}) and horizon ({horizon}) must be positive"
        )));
    }
    let len = segment.len();
    if len < w + horizon {
        return Ok(Vec::new());
    }
    let n = segment.num_zones();
    let count = len - w - horizon + 1;
    let mut out = Vec::with_capacity(count);
    for s in 0..count {
        let mut data = Vec::with_capacity(n * NUM_FEATURES * w);
        for z in 0..n {
            for f in 0..NUM_FEATURES {
                data.extend_from_slice(&segment.series(z, f)[s..s + w]);
            }
        }
        let target_idx = s + w - 1 + horizon;
        out.push(SampleWindow {
            input_start: segment.timestamp(s),
            horizon,
            input: Tensor::new(vec![n, NUM_FEATURES, w], data)?,
            target: (0..n).map(|z| segment.occupancy(z, target_idx)).collect(),
        });
    }
    Ok(out)
}

/// Contiguous, disjoint, ordered train / validation / test segments.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: FeaturePanel,
    pub validation: FeaturePanel,
    pub test: FeaturePanel,
}

/// Splits by `ratios` in time order. Train and validation lengths are
/// floored; the test segment takes the remainder. Every segment must hold at
/// least `min_len` steps (use `w + horizon` to guarantee one window).
pub fn chronological_split(panel: &FeaturePanel, ratios: [usize; 3], min_len: usize) -> Result<Split> {
    if ratios.iter().any(|&r| r == 0) {
        return Err(PagError::Config(format!("split ratios must be positive: {ratios:?}")));
    }
    let total: usize = ratios.iter().sum();
    let t = panel.len();
    let train = t * ratios[0] / total;
    let val = t * ratios[1] / total;
    let test = t - train - val;
    for (name, len) in [("train", train), ("validation", val), ("test", test)] {
        if len < min_len.max(1) {
            return Err(PagError::TooShort(format!(
                "{name} segment has {len} steps, need at least {min_len}"
            )));
        }
    }
    Ok(Split {
        train: panel.segment(0, train),
        validation: panel.segment(train, val),
        test: panel.segment(train + val, test),
    })
}
