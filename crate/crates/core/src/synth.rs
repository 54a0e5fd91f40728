//! Synthetic charging markets with known price elasticity and a pricing
//! policy that can bias the observed price/occupancy relationship.
//!
//! Latent demand follows a two-peak daily profile per zone plus a slow AR(1)
//! disturbance. Observed occupancy is latent demand scaled by the price
//! response `1 + elasticity * deviation`, plus displaced demand from 1-hop
//! neighbours and measurement noise. Under peak-reactive pricing prices rise
//! exactly when latent demand is high, so naive price/occupancy correlation is
//! positive even though the true elasticity is negative.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{FeaturePanel, ZoneGraph, NUM_FEATURES, OCCUPANCY, PRICE};
use crate::error::{PagError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    #[default]
    RandomGeometric,
    Grid,
    Ring,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PricingPolicy {
    /// Base price plus exogenous jitter only.
    Fixed,
    /// Surcharge while latent demand is above the zone's peak quantile.
    #[default]
    PeakReactive,
}

/// Everything that determines a synthetic market; generation is a pure
/// function of this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketSpec {
    pub zones: usize,
    pub topology: Topology,
    /// Target mean degree of the random geometric graph.
    pub mean_degree: f64,
    pub days: usize,
    pub steps_per_day: usize,
    /// True price elasticity of demand.
    pub elasticity: f64,
    pub pricing: PricingPolicy,
    /// Fraction of zones that follow `pricing`; the rest use fixed pricing.
    pub dynamic_share: f64,
    /// Latent-demand quantile above which peak-reactive zones add the surcharge.
    pub peak_quantile: f64,
    /// Relative surcharge at peak.
    pub surcharge: f64,
    /// Std of the exogenous relative price jitter, redrawn every hour.
    pub price_jitter: f64,
    pub base_price: f64,
    /// Fraction of the local response displaced to neighbours (1 matches the
    /// tuning law; 0.5 is a deliberately misspecified world).
    pub spillover_share: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for MarketSpec {
    fn default() -> Self {
        MarketSpec {
            zones: 20,
            topology: Topology::RandomGeometric,
            mean_degree: 4.0,
            days: 14,
            steps_per_day: 288,
            elasticity: -1.0,
            pricing: PricingPolicy::PeakReactive,
            dynamic_share: 1.0,
            peak_quantile: 0.7,
            surcharge: 0.2,
            price_jitter: 0.02,
            base_price: 1.0,
            spillover_share: 1.0,
            noise_std: 0.01,
            seed: 2023,
        }
    }
}

impl MarketSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PagError::Config(format!("market: {m}")));
        if self.zones == 0 || self.days == 0 || self.steps_per_day == 0 {
            return bad("zones, days and steps_per_day must be positive");
        }
        if !(0.0..=1.0).contains(&self.dynamic_share) || !(0.0..1.0).contains(&self.peak_quantile) {
            return bad("dynamic_share must lie in [0, 1] and peak_quantile in [0, 1)");
        }
        if !(self.base_price > 0.0) || self.surcharge <= -1.0 {
            return bad("prices must stay positive");
        }
        if self.noise_std < 0.0 || self.price_jitter < 0.0 || self.mean_degree < 0.0 {
            return bad("noise_std, price_jitter and mean_degree must be nonnegative");
        }
        if self.topology == Topology::Grid && grid_side(self.zones).is_none() {
            return bad("grid topology needs a square zone count");
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.days * self.steps_per_day
    }
}

/// The generative state needed to replay any counterfactual price.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `latent[zone][t]`.
    pub latent: Vec<Vec<f64>>,
    /// Relative price deviation from the zone's base price, `[zone][t]`.
    pub deviation: Vec<Vec<f64>>,
    pub base_price: Vec<f64>,
    /// Whether each zone follows the configured (possibly reactive) policy.
    pub dynamic: Vec<bool>,
    pub elasticity: f64,
    pub spillover_share: f64,
    pub start: i64,
}

impl GroundTruth {
    pub fn dynamic_zones(&self) -> Vec<usize> {
        (0..self.dynamic.len()).filter(|&z| self.dynamic[z]).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| crate::data::csv_error(path, e);
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["timestamp", "zone_id", "latent_demand", "price_deviation"])
            .map_err(err)?;
        let steps = self.latent.first().map_or(0, Vec::len);
        for t in 0..steps {
            for z in 0..self.latent.len() {
                w.write_record([
                    (self.start + t as i64).to_string(),
                    z.to_string(),
                    self.latent[z][t].to_string(),
                    self.deviation[z][t].to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| PagError::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct Market {
    pub graph: ZoneGraph,
    pub panel: FeaturePanel,
    pub truth: GroundTruth,
}

impl Market {
    /// Writes `nodes.csv`, `edges.csv`, `timeseries.csv` and `truth.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| PagError::io(dir, e))?;
        self.graph.write_csv(&dir.join("nodes.csv"), &dir.join("edges.csv"))?;
        self.panel.write_csv(&dir.join("timeseries.csv"))?;
        self.truth.write_csv(&dir.join("truth.csv"))
    }

    /// Mean over the given zones of the per-zone Pearson correlation between
    /// observed occupancy and price.
    pub fn price_occupancy_correlation(&self, zones: &[usize]) -> f64 {
        if zones.is_empty() {
            return 0.0;
        }
        let total: f64 = zones
            .iter()
            .map(|&z| pearson(self.panel.series(z, OCCUPANCY), self.panel.series(z, PRICE)))
            .sum();
        total / zones.len() as f64
    }
}

/// Minimum mean price/occupancy correlation a peak-reactive market must show.
pub const MIN_REACTIVE_CORRELATION: f64 = 0.2;

/// Two-peak daily shape on `[0.2, 0.65]`, peaking around 06:00 and 18:00.
pub fn daily_profile(day_fraction: f64) -> f64 {
    0.5 - 0.15 * (TAU * day_fraction).cos() - 0.15 * (2.0 * TAU * day_fraction).cos()
}

/// Observed occupancy for every zone at one step given latent demand and
/// relative price deviations, before noise and clamping.
pub fn occupancy_response(graph: &ZoneGraph, latent: &[f64], deviation: &[f64], elasticity: f64, share: f64) -> Vec<f64> {
    let local: Vec<f64> = latent
        .iter()
        .zip(deviation)
        .map(|(d, dev)| elasticity * dev * d)
        .collect();
    let mut out: Vec<f64> = latent.iter().zip(&local).map(|(d, l)| d + l).collect();
    for (i, &li) in local.iter().enumerate() {
        let nbrs = graph.neighbors(i);
        for &j in nbrs {
            out[j] -= share * li / nbrs.len() as f64;
        }
    }
    out
}

pub fn generate(spec: &MarketSpec) -> Result<Market> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.zones;
    let steps = spec.steps();
    let graph = build_topology(spec, &mut rng)?;

    let level: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..1.0)).collect();
    let phase: Vec<f64> = (0..n).map(|_| rng.random_range(-0.03..0.03)).collect();
    let base_price: Vec<f64> = (0..n)
        .map(|_| spec.base_price * rng.random_range(0.8..1.2))
        .collect();
    let dynamic_count = (spec.dynamic_share * n as f64).round() as usize;
    let dynamic: Vec<bool> = (0..n).map(|z| z < dynamic_count).collect();

    let shock = Normal::new(0.0, 0.01).expect("valid std");
    let mut latent = vec![vec![0.0; steps]; n];
    for z in 0..n {
        let mut ar = 0.0;
        for t in 0..steps {
            ar = 0.97 * ar + shock.sample(&mut rng);
            let tau = (t % spec.steps_per_day) as f64 / spec.steps_per_day as f64 + phase[z];
            latent[z][t] = (level[z] * daily_profile(tau) + ar).clamp(0.02, 0.98);
        }
    }

    let jitter = Normal::new(0.0, spec.price_jitter).expect("valid std");
    let per_hour = (spec.steps_per_day / 24).max(1);
    let mut deviation = vec![vec![0.0; steps]; n];
    for z in 0..n {
        let threshold = quantile(&latent[z], spec.peak_quantile);
        let mut current = 0.0;
        for t in 0..steps {
            if t % per_hour == 0 {
                current = jitter.sample(&mut rng);
            }
            let peak = dynamic[z] && spec.pricing == PricingPolicy::PeakReactive && latent[z][t] > threshold;
            let dev = current + if peak { spec.surcharge } else { 0.0 };
            deviation[z][t] = dev.max(-0.9);
        }
    }

    let noise = Normal::new(0.0, spec.noise_std).expect("valid std");
    let mut values = Tensor::zeros(&[n, NUM_FEATURES, steps]);
    let mut d_t = vec![0.0; n];
    let mut dev_t = vec![0.0; n];
    for t in 0..steps {
        for z in 0..n {
            d_t[z] = latent[z][t];
            dev_t[z] = deviation[z][t];
        }
        let occ = occupancy_response(&graph, &d_t, &dev_t, spec.elasticity, spec.spillover_share);
        for z in 0..n {
            let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            values.set(&[z, OCCUPANCY, t], (occ[z] + eps).clamp(0.0, 1.0));
            values.set(&[z, PRICE, t], base_price[z] * (1.0 + dev_t[z]));
        }
    }
    let panel = FeaturePanel::new(values, 0)?;
    let truth = GroundTruth {
        latent,
        deviation,
        base_price,
        dynamic,
        elasticity: spec.elasticity,
        spillover_share: spec.spillover_share,
        start: 0,
    };
    let market = Market { graph, panel, truth };
    if spec.pricing == PricingPolicy::PeakReactive && spec.elasticity < 0.0 && dynamic_count > 0 {
        let corr = market.price_occupancy_correlation(&market.truth.dynamic_zones());
        if corr <= MIN_REACTIVE_CORRELATION {
            return Err(PagError::Degenerate(format!(
                "peak-reactive market shows price/occupancy correlation {corr:.3}, \
                 not above {MIN_REACTIVE_CORRELATION}; raise the surcharge or lower the noise"
            )));
        }
    }
    Ok(market)
}

/// Exact response of every zone's occupancy (before noise and clamping) to
/// raising `zone`'s price at step `t` by the relative amount `impulse`.
pub fn probe_truth(truth: &GroundTruth, graph: &ZoneGraph, zone: usize, t: usize, impulse: f64) -> Result<Vec<f64>> {
    let n = truth.latent.len();
    if zone >= n || graph.num_zones() != n {
        return Err(PagError::Graph(format!("zone {zone} not in a {n}-zone market")));
    }
    if t >= truth.latent[zone].len() {
        return Err(PagError::Panel(format!("step {t} outside the market horizon")));
    }
    let extra = impulse * (1.0 + truth.deviation[zone][t]);
    let local = truth.elasticity * extra * truth.latent[zone][t];
    let mut out = vec![0.0; n];
    out[zone] = local;
    let nbrs = graph.neighbors(zone);
    for &j in nbrs {
        out[j] = -truth.spillover_share * local / nbrs.len() as f64;
    }
    Ok(out)
}

fn grid_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

fn build_topology(spec: &MarketSpec, rng: &mut ChaCha8Rng) -> Result<ZoneGraph> {
    let n = spec.zones;
    let mut edges = Vec::new();
    match spec.topology {
        Topology::Ring => {
            if n > 2 {
                edges.extend((0..n).map(|i| (i, (i + 1) % n)));
            } else if n == 2 {
                edges.push((0, 1));
            }
        }
        Topology::Grid => {
            let s = grid_side(n).expect("validated");
            for r in 0..s {
                for c in 0..s {
                    let i = r * s + c;
                    if c + 1 < s {
                        edges.push((i, i + 1));
                    }
                    if r + 1 < s {
                        edges.push((i, i + s));
                    }
                }
            }
        }
        Topology::RandomGeometric => {
            let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
            let dist = |i: usize, j: usize| (pts[i].0 - pts[j].0).hypot(pts[i].1 - pts[j].1);
            // Unit-square connection radius giving the requested expected degree.
            let radius = if n > 1 {
                (spec.mean_degree / (std::f64::consts::PI * (n - 1) as f64)).sqrt()
            } else {
                0.0
            };
            for i in 0..n {
                for j in i + 1..n {
                    if dist(i, j) <= radius {
                        edges.push((i, j));
                    }
                }
            }
            // No zone is left isolated: attach it to its nearest neighbour.
            let mut degree = vec![0usize; n];
            for &(a, b) in &edges {
                degree[a] += 1;
                degree[b] += 1;
            }
            for i in 0..n {
                if degree[i] == 0 && n > 1 {
                    let j = (0..n)
                        .filter(|&j| j != i)
                        .min_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)))
                        .expect("n > 1");
                    edges.push((i, j));
                    degree[i] += 1;
                    degree[j] += 1;
                }
            }
        }
    }
    ZoneGraph::new(n, edges)
}

fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).round() as usize]
}

/// Pearson correlation; zero when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
