//! Physics-informed pre-training: tuning samples generated from price
//! elasticity laws and first-order MAML over one buffer per law.
//!
//! A tuning sample is an observed window whose price channel was scaled by a
//! random relative impulse in a few zones, with the target shifted by the
//! law's local response and the opposite displaced demand split evenly over
//! each impulsed zone's neighbours. Impulsed zones are chosen so their closed
//! neighbourhoods do not overlap, which keeps every target shift attributable
//! to exactly one impulse.

use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mask;
use crate::data::{NormalizationStats, SampleWindow, ZoneGraph, PRICE};
use crate::error::{PagError, Result};
use crate::exec::Execution;
use crate::model::ModelConfig;
use crate::params::ModelParams;
use crate::training::batch_gradient;

/// Smallest allowed relative price after an impulse, keeping prices positive.
pub const MIN_PRICE_FACTOR: f64 = 0.05;

/// A demand law `dy / y = elasticity * dp / p` with its impulse scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElasticityLaw {
    pub label: String,
    pub elasticity: f64,
    /// Std of the relative price impulse `dp / p`.
    #[serde(default = "default_impulse_std")]
    pub impulse_std: f64,
}

fn default_impulse_std() -> f64 {
    0.1
}

impl ElasticityLaw {
    pub fn new(label: impl Into<String>, elasticity: f64, impulse_std: f64) -> Result<Self> {
        let law = ElasticityLaw {
            label: label.into(),
            elasticity,
            impulse_std,
        };
        law.validate()?;
        Ok(law)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.elasticity < 0.0) {
            return Err(PagError::Config(format!(
                "law {}: elasticity {} must be negative",
                self.label, self.elasticity
            )));
        }
        if !(self.impulse_std >= 0.0) {
            return Err(PagError::Config(format!("law {}: impulse_std must be nonnegative", self.label)));
        }
        Ok(())
    }

    /// EV charging (-1.48) and household electricity (-0.228).
    pub fn defaults() -> Vec<ElasticityLaw> {
        vec![
            ElasticityLaw {
                label: "ev_charging".into(),
                elasticity: -1.48,
                impulse_std: 0.1,
            },
            ElasticityLaw {
                label: "household_electricity".into(),
                elasticity: -0.228,
                impulse_std: 0.1,
            },
        ]
    }
}

/// Meta-learning hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Outer (meta) learning rate.
    pub meta_lr: f64,
    /// Inner adaptation learning rate.
    pub inner_lr: f64,
    pub epochs: usize,
    /// Epoch at which the tuning-sample share reaches zero: `1 - e / mix_decay`.
    pub mix_decay: f64,
    /// Windows drawn from each of support and query per epoch; 0 uses the
    /// whole buffer every epoch.
    pub batch: usize,
    /// Keep every `window_stride`-th training window as a buffer base sample.
    pub window_stride: usize,
    /// Continue the mixing schedule into fine-tuning, counting fine-tuning
    /// epochs after the pre-training epochs.
    pub finetune_mix: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            meta_lr: 0.005,
            inner_lr: 0.001,
            epochs: 200,
            mix_decay: 1000.0,
            batch: 0,
            window_stride: 1,
            finetune_mix: true,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0) || !(self.meta_lr >= 0.0) || !(self.mix_decay > 0.0) || self.window_stride == 0 {
            return Err(PagError::Config(
                "meta: inner_lr and mix_decay must be positive, meta_lr nonnegative, window_stride positive".into(),
            ));
        }
        Ok(())
    }

    /// Share of tuning samples in epoch `e`, clamped to `[0, 1]`.
    pub fn tuning_share(&self, epoch: usize) -> f64 {
        (1.0 - epoch as f64 / self.mix_decay).clamp(0.0, 1.0)
    }
}

/// One impulse and the responses it induced on the (occupancy-scale) target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impulse {
    pub zone: usize,
    /// Relative price change `dp / p`, applied at every step of the window.
    pub relative: f64,
    /// Target occupancy of `zone` before the impulse.
    pub base_target: f64,
    /// Local response before clamping.
    pub local: f64,
    /// `(neighbour, response)` before clamping.
    pub spillover: Vec<(usize, f64)>,
}

/// A tuned window on the original scale.
#[derive(Clone, Debug, PartialEq)]
pub struct TunedWindow {
    pub window: SampleWindow,
    /// Shifted targets before clamping to `[0, 1]`.
    pub unclamped_target: Vec<f64>,
    pub impulses: Vec<Impulse>,
}

/// Local response `elasticity * (dp / p) * y`.
pub fn local_response(dp: f64, p: f64, y: f64, elasticity: f64) -> f64 {
    elasticity * (dp / p) * y
}

/// Response of each of `neighbors` 1-hop neighbours to a local response
/// `dy`: the displaced demand split evenly. Empty for an isolated zone.
pub fn spillover_response(dy: f64, neighbors: usize) -> Vec<f64> {
    vec![-dy / neighbors as f64; neighbors]
}

/// Picks impulse zones with pairwise disjoint closed neighbourhoods in random
/// order and draws a relative impulse for each.
pub fn generate_impulses(graph: &ZoneGraph, law: &ElasticityLaw, rng: &mut ChaCha8Rng) -> Vec<(usize, f64)> {
    let n = graph.num_zones();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut covered = vec![false; n];
    let mut chosen = Vec::new();
    for z in order {
        let hood = graph.neighborhood(z);
        if hood.iter().any(|&j| covered[j]) {
            continue;
        }
        for j in hood {
            covered[j] = true;
        }
        chosen.push(z);
    }
    chosen.sort_unstable();
    let normal = Normal::new(0.0, law.impulse_std).expect("validated std");
    chosen
        .into_iter()
        .map(|z| {
            let r = if law.impulse_std > 0.0 { normal.sample(rng) } else { 0.0 };
            (z, r.max(MIN_PRICE_FACTOR - 1.0))
        })
        .collect()
}

/// Applies impulses to a window on the original scale: price of each impulsed
/// zone scaled by `1 + r` at every step, targets shifted by local and
/// spillover responses, then clamped to `[0, 1]`.
pub fn apply_impulses(raw: &SampleWindow, graph: &ZoneGraph, law: &ElasticityLaw, impulses: &[(usize, f64)]) -> TunedWindow {
    let mut window = raw.clone();
    let mut target = raw.target.clone();
    let mut records = Vec::with_capacity(impulses.len());
    for &(zone, r) in impulses {
        for step in 0..raw.window_len() {
            let p = raw.feature(zone, PRICE, step);
            window.set_feature(zone, PRICE, step, p * (1.0 + r));
        }
        let y = raw.target[zone];
        let local = local_response(r, 1.0, y, law.elasticity);
        let nbrs = graph.neighbors(zone);
        let spill = spillover_response(local, nbrs.len());
        target[zone] += local;
        for (&j, &dy) in nbrs.iter().zip(&spill) {
            target[j] += dy;
        }
        records.push(Impulse {
            zone,
            relative: r,
            base_target: y,
            local,
            spillover: nbrs.iter().copied().zip(spill).collect(),
        });
    }
    window.target = target.iter().map(|y| y.clamp(0.0, 1.0)).collect();
    TunedWindow {
        window,
        unclamped_target: target,
        impulses: records,
    }
}

/// Law-generated samples with their observed counterparts, normalised and
/// split chronologically into support (earlier half) and query (later half).
#[derive(Clone, Debug)]
pub struct TuningBuffer {
    pub law: ElasticityLaw,
    pub tuned: Vec<SampleWindow>,
    pub observed: Vec<SampleWindow>,
    pub impulses: Vec<Vec<Impulse>>,
    /// Index of the first query sample.
    pub split: usize,
    /// Seed of this buffer's per-epoch mixing stream.
    pub seed: u64,
}

impl TuningBuffer {
    pub fn support(&self) -> (&[SampleWindow], &[SampleWindow]) {
        (&self.tuned[..self.split], &self.observed[..self.split])
    }

    pub fn query(&self) -> (&[SampleWindow], &[SampleWindow]) {
        (&self.tuned[self.split..], &self.observed[self.split..])
    }
}

/// One buffer per law from raw (original-scale) training windows.
pub fn build_buffers(
    train: &[SampleWindow],
    graph: &ZoneGraph,
    laws: &[ElasticityLaw],
    stats: &NormalizationStats,
    seed: u64,
) -> Result<Vec<TuningBuffer>> {
    if laws.is_empty() {
        return Err(PagError::Config("at least one elasticity law is required".into()));
    }
    if train.len() < 2 {
        return Err(PagError::TooShort(format!(
            "{} training windows; support and query need one each",
            train.len()
        )));
    }
    let mut sorted: Vec<&SampleWindow> = train.iter().collect();
    sorted.sort_by_key(|w| w.input_start);
    let observed: Vec<SampleWindow> = sorted.iter().map(|w| stats.normalize_window(w)).collect();
    laws.iter()
        .enumerate()
        .map(|(s, law)| {
            law.validate()?;
            let buffer_seed = seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(s as u64 + 1));
            let mut rng = ChaCha8Rng::seed_from_u64(buffer_seed);
            let mut tuned = Vec::with_capacity(sorted.len());
            let mut impulses = Vec::with_capacity(sorted.len());
            for w in &sorted {
                let picks = generate_impulses(graph, law, &mut rng);
                let t = apply_impulses(w, graph, law, &picks);
                tuned.push(stats.normalize_window(&t.window));
                impulses.push(t.impulses);
            }
            Ok(TuningBuffer {
                law: law.clone(),
                tuned,
                observed: observed.clone(),
                impulses,
                split: sorted.len() / 2,
                seed: buffer_seed,
            })
        })
        .collect()
}

/// Draws an epoch sample set: `batch` positions (all when 0), of which a
/// `share` fraction, rounded, use the tuned sample and the rest the observed one.
pub fn mix_real_samples<'a>(
    tuned: &'a [SampleWindow],
    observed: &'a [SampleWindow],
    share: f64,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a SampleWindow> {
    let len = tuned.len();
    let take = if batch == 0 { len } else { batch.min(len) };
    let mut picks = if take == len {
        (0..len).collect::<Vec<_>>()
    } else {
        let mut v = index::sample(rng, len, take).into_vec();
        v.sort_unstable();
        v
    };
    let tuned_count = (share.clamp(0.0, 1.0) * take as f64).round() as usize;
    picks.shuffle(rng);
    let mut out: Vec<(usize, &SampleWindow)> = picks
        .iter()
        .enumerate()
        .map(|(k, &i)| (i, if k < tuned_count { &tuned[i] } else { &observed[i] }))
        .collect();
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, w)| w).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaEpoch {
    pub epoch: usize,
    pub tuning_share: f64,
    /// Mean query loss at the adapted parameters, averaged over buffers.
    pub query_loss: f64,
}

/// First-order MAML. Per epoch and buffer: `g1` is the mean support gradient
/// at `phi`, `theta = phi - inner_lr g1`, `g2` the mean query gradient at
/// `theta`; then `phi <- phi - meta_lr * sum(g2) / S`.
pub fn fomaml_pretrain(
    model: &ModelConfig,
    phi: &mut ModelParams,
    buffers: &[TuningBuffer],
    cfg: &MetaConfig,
    mask: &Arc<Mask>,
    exec: Execution,
) -> Result<Vec<MetaEpoch>> {
    cfg.validate()?;
    if buffers.is_empty() {
        return Err(PagError::Config("no tuning buffers".into()));
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let share = cfg.tuning_share(epoch);
        let mut outer = phi.zeros_like();
        let mut query_loss = 0.0;
        for buffer in buffers {
            let mut rng = ChaCha8Rng::seed_from_u64(buffer.seed.wrapping_add(epoch as u64));
            let (st, so) = buffer.support();
            let (qt, qo) = buffer.query();
            let support = mix_real_samples(st, so, share, cfg.batch, &mut rng);
            let query = mix_real_samples(qt, qo, share, cfg.batch, &mut rng);
            let (_, g1) = batch_gradient(model, phi, &support, mask, exec)?;
            let mut theta = phi.clone();
            theta.axpy(-cfg.inner_lr / support.len() as f64, &g1);
            let (loss, g2) = batch_gradient(model, &theta, &query, mask, exec)?;
            if !g1.all_finite() || !g2.all_finite() || !loss.is_finite() {
                return Err(PagError::Diverged(format!(
                    "non-finite meta gradient at epoch {epoch}, law {}",
                    buffer.law.label
                )));
            }
            outer.axpy(1.0 / query.len() as f64, &g2);
            query_loss += loss / query.len() as f64;
        }
        phi.axpy(-cfg.meta_lr / buffers.len() as f64, &outer);
        history.push(MetaEpoch {
            epoch,
            tuning_share: share,
            query_loss: query_loss / buffers.len() as f64,
        });
    }
    Ok(history)
}

/// Random relative impulse draws, for checking the impulse distribution.
pub fn sample_relative_impulses(law: &ElasticityLaw, count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, law.impulse_std).expect("validated std");
    (0..count)
        .map(|_| {
            let r: f64 = if law.impulse_std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            r.max(MIN_PRICE_FACTOR - 1.0)
        })
        .collect()
}
