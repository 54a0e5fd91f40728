//! Randomised comparisons of library operations against the scalar oracles.
//! Each returns the largest absolute deviation for one seed.

use std::sync::Arc;

use rand::Rng;

use pag_core::autodiff::{Graph, Mask};
use pag_core::data::ZoneGraph;
use pag_core::model::decoder::{lstm_forward, tpa_predict, tpa_scores, LstmVars};
use pag_core::model::embedding::{embed, gat_attention, gat_layer, gat_similarity, temporal_conv, HeadVars};
use pag_core::model::{predict_with, EmbeddingConfig, ModelConfig, PagModel};
use pag_core::piml::{local_response, spillover_response};
use pag_core::Tensor;

use super::*;

/// Node-by-feature matrix of one step of a `[T, N, F]` tensor.
fn nodes_of(t: &Tensor, step: usize) -> Mat {
    let (n, f) = (t.shape()[1], t.shape()[2]);
    (0..n).map(|i| (0..f).map(|k| t.at(&[step, i, k])).collect()).collect()
}

pub fn temporal_conv_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..5);
    let f = r.random_range(1..4);
    let h = r.random_range(1..4);
    let w = h + r.random_range(0..6);
    let stride = r.random_range(1..3);
    let input = random_tensor(&mut r, &[n, f, w], 2.0);
    let kernel = random_tensor(&mut r, &[f, h, f], 1.0);
    let bias = uniform(&mut r, f, 1.0);
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let k = g.constant(kernel.clone());
    let b = g.constant(Tensor::vector(bias.clone()));
    let y = temporal_conv(&mut g, x, k, b, stride).unwrap();
    let got = g.value(y).clone();
    let want = conv_oracle(&input, &kernel, &bias, stride);
    assert_eq!(got.shape(), [want.len(), n, f]);
    let mut err: f64 = 0.0;
    for (t, step) in want.iter().enumerate() {
        for (i, row) in step.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                err = err.max((got.at(&[t, i, c]) - v).abs());
            }
        }
    }
    err
}

pub fn similarity_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let f = r.random_range(1..5);
    let xi = uniform(&mut r, f, 2.0);
    let xj = uniform(&mut r, f, 2.0);
    let w = random_tensor(&mut r, &[f, f], 1.0);
    let a = uniform(&mut r, 2 * f, 1.0);
    let slope = r.random_range(0.0..0.5);
    let got = gat_similarity(&xi, &xj, &w, &a, slope).unwrap();
    (got - similarity_oracle(&xi, &xj, &to_mat(&w), &a, slope)).abs()
}

pub fn attention_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..9);
    let logits = uniform(&mut r, n, 5.0);
    let mut hood: Vec<usize> = (0..n).filter(|_| r.random_bool(0.6)).collect();
    if hood.is_empty() {
        hood.push(r.random_range(0..n));
    }
    let got = gat_attention(&logits, &hood).unwrap();
    max_abs_diff(&got, &softmax_oracle(&logits, &hood))
}

fn random_heads(r: &mut ChaCha8Rng, g: &mut Graph, k: usize, f: usize) -> (Vec<HeadVars>, Vec<HeadOracle>) {
    (0..k)
        .map(|_| {
            let w = random_tensor(r, &[f, f], 1.0);
            let a = uniform(r, 2 * f, 1.0);
            let vars = HeadVars {
                w: g.constant(w.clone()),
                a: g.constant(Tensor::vector(a.clone())),
            };
            (vars, HeadOracle { w: to_mat(&w), a })
        })
        .unzip()
}

fn random_graph(r: &mut ChaCha8Rng, n: usize) -> (Arc<Mask>, Vec<Vec<usize>>) {
    let extra = r.random_range(0..n + 1);
    let edges = random_edges(r, n, extra);
    let graph = ZoneGraph::new(n, edges.iter().copied()).unwrap();
    (graph.attention_mask(), neighborhoods(n, &edges))
}

pub fn gat_layer_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..7);
    let f = r.random_range(1..4);
    let k = r.random_range(1..4);
    let steps = r.random_range(1..3);
    let slope = 0.2;
    let (mask, hoods) = random_graph(&mut r, n);
    let mut g = Graph::new();
    let xt = random_tensor(&mut r, &[steps, n, f], 2.0);
    let x = g.constant(xt.clone());
    let (heads, oracle) = random_heads(&mut r, &mut g, k, f);
    let y = gat_layer(&mut g, x, &heads, &mask, slope).unwrap();
    let got = g.value(y).clone();
    let mut err: f64 = 0.0;
    for t in 0..steps {
        let want = gat_layer_oracle(&nodes_of(&xt, t), &oracle, &hoods, slope);
        err = err.max(max_abs_diff(&nodes_of(&got, t).concat(), &want.concat()));
    }
    err
}

pub fn embed_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..6);
    let f = r.random_range(1..4);
    let cfg = EmbeddingConfig {
        layers: r.random_range(1..4),
        heads: r.random_range(1..3),
        beta: r.random_range(0.0..1.0),
        ..EmbeddingConfig::default()
    };
    let (mask, hoods) = random_graph(&mut r, n);
    let mut g = Graph::new();
    let xt = random_tensor(&mut r, &[2, n, f], 2.0);
    let x = g.constant(xt.clone());
    let (layers, oracle): (Vec<_>, Vec<_>) = (0..cfg.layers).map(|_| random_heads(&mut r, &mut g, cfg.heads, f)).unzip();
    let y = embed(&mut g, x, &layers, &mask, &cfg).unwrap();
    let got = g.value(y).clone();
    assert_eq!(got.shape(), [2, n, cfg.layers * f]);
    let mut err: f64 = 0.0;
    for t in 0..2 {
        let want = embed_oracle(&nodes_of(&xt, t), &oracle, &hoods, cfg.leaky_slope, cfg.beta);
        err = err.max(max_abs_diff(&nodes_of(&got, t).concat(), &want.concat()));
    }
    err
}

pub fn lstm_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..4);
    let h = r.random_range(1..5);
    let steps = r.random_range(1..6);
    let mut g = Graph::new();
    let mats = |r: &mut ChaCha8Rng, g: &mut Graph| {
        let ts: [Tensor; 4] = std::array::from_fn(|_| random_tensor(r, &[h, h], 1.0));
        (ts.clone().map(|t| g.constant(t)), ts.map(|t| to_mat(&t)))
    };
    let (w_x, ow_x) = mats(&mut r, &mut g);
    let (w_h, ow_h) = mats(&mut r, &mut g);
    let vecs = |r: &mut ChaCha8Rng, g: &mut Graph| {
        let vs: [Vec<f64>; 4] = std::array::from_fn(|_| uniform(r, h, 1.0));
        (vs.clone().map(|v| g.constant(Tensor::vector(v))), vs)
    };
    let (b_x, ob_x) = vecs(&mut r, &mut g);
    let (b_h, ob_h) = vecs(&mut r, &mut g);
    let seq_t = random_tensor(&mut r, &[steps, n, h], 2.0);
    let seq = g.constant(seq_t.clone());
    let states = lstm_forward(&mut g, seq, &LstmVars { w_x, w_h, b_x, b_h }).unwrap();
    let oracle = LstmOracle {
        w_x: ow_x,
        w_h: ow_h,
        b_x: ob_x,
        b_h: ob_h,
    };
    let mut err: f64 = 0.0;
    for node in 0..n {
        let xs: Vec<Vec<f64>> = (0..steps).map(|t| (0..h).map(|k| seq_t.at(&[t, node, k])).collect()).collect();
        let want = lstm_oracle(&xs, &oracle);
        for (t, hw) in want.iter().enumerate() {
            let got = g.value(states.hidden[t + 1]);
            let row: Vec<f64> = (0..h).map(|k| got.at(&[node, k])).collect();
            err = err.max(max_abs_diff(&row, hw));
        }
    }
    err
}

struct TpaCase {
    history: Tensor,
    last: Tensor,
    filters: Tensor,
    w_alpha: Tensor,
    w_p: Tensor,
}

fn tpa_case(seed: u64) -> TpaCase {
    let mut r = rng(seed);
    let n = r.random_range(1..4);
    let m = r.random_range(1..4);
    let f = r.random_range(1..4);
    let len = r.random_range(1..6);
    TpaCase {
        history: random_tensor(&mut r, &[n, m * f, len], 1.0),
        last: random_tensor(&mut r, &[n, m * f], 1.0),
        filters: random_tensor(&mut r, &[m, f, len], 1.0),
        w_alpha: random_tensor(&mut r, &[m, m], 1.0),
        w_p: random_tensor(&mut r, &[m, 1], 1.0),
    }
}

fn tpa_oracle_of(c: &TpaCase, node: usize) -> TpaOracle {
    let (mf, len) = (c.history.shape()[1], c.history.shape()[2]);
    let (m, f) = (c.filters.shape()[0], c.filters.shape()[1]);
    let history: Mat = (0..mf).map(|row| (0..len).map(|l| c.history.at(&[node, row, l])).collect()).collect();
    let last: Vec<f64> = (0..mf).map(|k| c.last.at(&[node, k])).collect();
    let filters: Vec<Mat> = (0..m)
        .map(|ch| (0..f).map(|ff| (0..len).map(|l| c.filters.at(&[ch, ff, l])).collect()).collect())
        .collect();
    tpa_oracle(&history, &last, &filters)
}

/// Scores, filtered history and pooled state of the pattern attention.
pub fn tpa_score_error(seed: u64) -> f64 {
    let c = tpa_case(seed);
    let mut g = Graph::new();
    let h = g.constant(c.history.clone());
    let l = g.constant(c.last.clone());
    let fl = g.constant(c.filters.clone());
    let out = tpa_scores(&mut g, h, l, fl).unwrap();
    let n = c.history.shape()[0];
    let mut err: f64 = 0.0;
    for node in 0..n {
        let want = tpa_oracle_of(&c, node);
        let m = want.pooled.len();
        for a in 0..m {
            err = err.max((g.value(out.pooled).at(&[node, a]) - want.pooled[a]).abs());
            for b in 0..m {
                err = err.max((g.value(out.filtered).at(&[node, a, b]) - want.filtered[a][b]).abs());
                err = err.max((g.value(out.scores).at(&[node, a, b]) - want.scores[a][b]).abs());
            }
        }
    }
    err
}

/// Context vector and two-layer readout.
pub fn projection_error(seed: u64) -> f64 {
    let c = tpa_case(seed);
    let mut g = Graph::new();
    let h = g.constant(c.history.clone());
    let l = g.constant(c.last.clone());
    let fl = g.constant(c.filters.clone());
    let wa = g.constant(c.w_alpha.clone());
    let wp = g.constant(c.w_p.clone());
    let out = tpa_scores(&mut g, h, l, fl).unwrap();
    let y = tpa_predict(&mut g, &out, wa, wp).unwrap();
    let n = c.history.shape()[0];
    let w_alpha = to_mat(&c.w_alpha);
    (0..n)
        .map(|node| {
            let want = projection_oracle(&tpa_oracle_of(&c, node), &w_alpha, c.w_p.data());
            (g.value(y).data()[node] - want).abs()
        })
        .fold(0.0, f64::max)
}

/// Local law against `elasticity * relative price change * occupancy`,
/// computed from an explicit old/new price pair.
pub fn local_law_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let p = r.random_range(0.1..3.0);
    let p_new = p * r.random_range(0.5..1.5);
    let y = r.random_range(0.0..1.0);
    let e = r.random_range(-3.0..0.0);
    let want = e * ((p_new - p) / p) * y;
    (local_response(p_new - p, p, y, e) - want).abs()
}

/// Spillover: equal shares summing to the negated local response.
pub fn spillover_law_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let dy = r.random_range(-1.0..1.0);
    let k = r.random_range(1..10);
    let out = spillover_response(dy, k);
    assert_eq!(out.len(), k);
    let shares = out.iter().map(|v| (v + dy / k as f64).abs()).fold(0.0, f64::max);
    shares.max((out.iter().sum::<f64>() + dy).abs())
}

/// Whole forward pass against the composed oracles.
pub fn model_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..6);
    let config = ModelConfig {
        embedding: EmbeddingConfig {
            layers: r.random_range(1..3),
            heads: r.random_range(1..3),
            beta: r.random_range(0.0..1.0),
            ..EmbeddingConfig::default()
        },
        window: r.random_range(3..7),
        ..ModelConfig::default()
    };
    let model = PagModel::init(config.clone(), seed).unwrap();
    let edges = random_edges(&mut r, n, 2);
    let graph = ZoneGraph::new(n, edges.iter().copied()).unwrap();
    let input = random_tensor(&mut r, &[n, 2, config.window], 2.0);
    let got = predict_with(&config, &model.params, &input, &graph.attention_mask()).unwrap();
    max_abs_diff(&got, &model_oracle(&config, &model.params, &input, &neighborhoods(n, &edges)))
}

/// Every check by name, for suites that run them all.
pub const ALL: [(&str, fn(u64) -> f64); 11] = [
    ("temporal convolution", temporal_conv_error),
    ("attention similarity", similarity_error),
    ("neighbourhood softmax", attention_error),
    ("attention layer", gat_layer_error),
    ("momentum residual embedding", embed_error),
    ("lstm", lstm_error),
    ("pattern attention scores", tpa_score_error),
    ("readout projection", projection_error),
    ("local elasticity response", local_law_error),
    ("spillover response", spillover_law_error),
    ("full forward pass", model_error),
];

/// Largest violation over every impulse of every buffer of
/// `(dy / y) / (dp / p) = elasticity` and `sum_j dy_j = -dy_i`, before clamping.
pub fn tuning_law_error(buffers: &[pag_core::piml::TuningBuffer]) -> (f64, usize) {
    let mut err: f64 = 0.0;
    let mut count = 0;
    for b in buffers {
        for imp in b.impulses.iter().flatten() {
            if imp.base_target > 0.0 && imp.relative != 0.0 {
                let implied = (imp.local / imp.base_target) / imp.relative;
                err = err.max((implied - b.law.elasticity).abs());
            }
            if !imp.spillover.is_empty() {
                let spill: f64 = imp.spillover.iter().map(|(_, dy)| dy).sum();
                err = err.max((spill + imp.local).abs());
            }
            count += 1;
        }
    }
    (err, count)
}
