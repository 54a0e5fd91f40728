//! Fixtures and oracle comparisons for first-order meta-learning.

use std::sync::Arc;

use pag_core::autodiff::{value_and_grad, Mask};
use pag_core::data::{SampleWindow, ZoneGraph};
use pag_core::exec::Execution;
use pag_core::model::{EmbeddingConfig, ModelConfig, PagModel};
use pag_core::piml::{fomaml_pretrain, ElasticityLaw, MetaConfig, TuningBuffer};
use pag_core::ModelParams;

use super::{random_edges, random_tensor, rng, uniform};

pub fn small_model(seed: u64) -> PagModel {
    let config = ModelConfig {
        embedding: EmbeddingConfig {
            heads: 2,
            ..EmbeddingConfig::default()
        },
        window: 4,
        ..ModelConfig::default()
    };
    PagModel::init(config, seed).unwrap()
}

pub fn random_window(seed: u64, n: usize) -> SampleWindow {
    let mut r = rng(seed);
    SampleWindow {
        input_start: 0,
        horizon: 1,
        input: random_tensor(&mut r, &[n, 2, 4], 1.0),
        target: uniform(&mut r, n, 1.0),
    }
}

pub fn buffer(label: &str, support: SampleWindow, query: SampleWindow, seed: u64) -> TuningBuffer {
    TuningBuffer {
        law: ElasticityLaw::new(label, -1.0, 0.1).unwrap(),
        tuned: vec![support.clone(), query.clone()],
        observed: vec![support, query],
        impulses: vec![Vec::new(), Vec::new()],
        split: 1,
        seed,
    }
}

pub fn mask(n: usize, seed: u64) -> Arc<Mask> {
    ZoneGraph::new(n, random_edges(&mut rng(seed), n, 1)).unwrap().attention_mask()
}

fn grad(model: &PagModel, params: &ModelParams, w: &SampleWindow, mask: &Arc<Mask>) -> ModelParams {
    value_and_grad(params, |g, p| PagModel::sample_loss(&model.config, g, p, w, mask)).unwrap().1
}

/// One task whose support and query are the same sample: each epoch is
/// `theta = phi - a g(phi)`, `phi <- phi - b g(theta)`.
pub fn single_task_deviation(seed: u64) -> f64 {
    let model = small_model(seed);
    let mask = mask(4, seed);
    let w = random_window(seed, 4);
    let cfg = MetaConfig {
        meta_lr: 0.05,
        inner_lr: 0.02,
        epochs: 3,
        ..MetaConfig::default()
    };
    let mut phi = model.params.clone();
    fomaml_pretrain(&model.config, &mut phi, &[buffer("a", w.clone(), w.clone(), 1)], &cfg, &mask, Execution::Sequential)
        .unwrap();

    let mut oracle = model.params.clone();
    for _ in 0..cfg.epochs {
        let mut theta = oracle.clone();
        theta.axpy(-cfg.inner_lr, &grad(&model, &oracle, &w, &mask));
        oracle.axpy(-cfg.meta_lr, &grad(&model, &theta, &w, &mask));
    }
    phi.max_abs_diff(&oracle)
}

/// Two buffers pre-trained in both orders (and both execution modes); the
/// largest parameter difference.
pub fn permutation_deviation(seed: u64) -> f64 {
    let model = small_model(seed);
    let mask = mask(4, seed);
    let a = buffer("a", random_window(seed + 10, 4), random_window(seed + 11, 4), seed + 5);
    let b = buffer("b", random_window(seed + 12, 4), random_window(seed + 13, 4), seed + 6);
    let cfg = MetaConfig {
        epochs: 4,
        ..MetaConfig::default()
    };
    let mut p1 = model.params.clone();
    let mut p2 = model.params.clone();
    fomaml_pretrain(&model.config, &mut p1, &[a.clone(), b.clone()], &cfg, &mask, Execution::Parallel).unwrap();
    fomaml_pretrain(&model.config, &mut p2, &[b, a], &cfg, &mask, Execution::Sequential).unwrap();
    assert!(p1.max_abs_diff(&model.params) > 0.0, "pre-training left parameters unchanged");
    p1.max_abs_diff(&p2)
}
