//! Scalar reference implementations shared by the integration tests. They
//! use plain nested vectors and explicit loops, nothing from the graph engine.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pag_core::model::ModelConfig;
use pag_core::{ModelParams, Tensor};

pub mod checks;
pub mod meta;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn matvec(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn to_mat(t: &Tensor) -> Mat {
    let s = t.shape();
    assert_eq!(s.len(), 2);
    (0..s[0]).map(|i| (0..s[1]).map(|j| t.at(&[i, j])).collect()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `out[t][n][c] = bias[c] + sum_{r, f} kernel[c, r, f] * input[n, f, t*stride + r]`.
pub fn conv_oracle(input: &Tensor, kernel: &Tensor, bias: &[f64], stride: usize) -> Vec<Mat> {
    let (n, f, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, h) = (kernel.shape()[0], kernel.shape()[1]);
    let len = (w - h) / stride + 1;
    (0..len)
        .map(|t| {
            (0..n)
                .map(|node| {
                    (0..c_out)
                        .map(|c| {
                            let mut acc = bias[c];
                            for r in 0..h {
                                for ff in 0..f {
                                    acc += kernel.at(&[c, r, ff]) * input.at(&[node, ff, t * stride + r]);
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// `LeakyReLU(a^T [W x_i || W x_j])`.
pub fn similarity_oracle(x_i: &[f64], x_j: &[f64], w: &Mat, a: &[f64], slope: f64) -> f64 {
    let zi = matvec(w, x_i);
    let zj = matvec(w, x_j);
    let fo = zi.len();
    let s: f64 = (0..fo).map(|k| a[k] * zi[k] + a[fo + k] * zj[k]).sum();
    leaky_relu(s, slope)
}

/// Softmax of `logits` over `hood`; zero elsewhere.
pub fn softmax_oracle(logits: &[f64], hood: &[usize]) -> Vec<f64> {
    let m = hood.iter().map(|&j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = hood.iter().map(|&j| (logits[j] - m).exp()).sum();
    let mut out = vec![0.0; logits.len()];
    for &j in hood {
        out[j] = (logits[j] - m).exp() / z;
    }
    out
}

pub struct HeadOracle {
    pub w: Mat,
    pub a: Vec<f64>,
}

/// One attention layer on `x[node][feature]` with a materialised `N x N`
/// coefficient matrix per head.
pub fn gat_layer_oracle(x: &Mat, heads: &[HeadOracle], hoods: &[Vec<usize>], slope: f64) -> Mat {
    let n = x.len();
    let fo = heads[0].w.len();
    let mut acc = vec![vec![0.0; fo]; n];
    for head in heads {
        let z: Mat = x.iter().map(|xi| matvec(&head.w, xi)).collect();
        for i in 0..n {
            let logits: Vec<f64> = (0..n).map(|j| similarity_oracle(&x[i], &x[j], &head.w, &head.a, slope)).collect();
            let alpha = softmax_oracle(&logits, &hoods[i]);
            for j in 0..n {
                for k in 0..fo {
                    acc[i][k] += alpha[j] * z[j][k];
                }
            }
        }
    }
    let k = heads.len() as f64;
    acc.iter().map(|row| row.iter().map(|v| sigmoid(v / k)).collect()).collect()
}

/// Stacked layers with momentum residual; returns `x''[node]` of length `M F`.
pub fn embed_oracle(x: &Mat, layers: &[Vec<HeadOracle>], hoods: &[Vec<usize>], slope: f64, beta: f64) -> Mat {
    let mut out = vec![Vec::new(); x.len()];
    let mut prev = x.clone();
    for heads in layers {
        let cur = gat_layer_oracle(&prev, heads, hoods, slope);
        for i in 0..x.len() {
            for k in 0..cur[i].len() {
                out[i].push((1.0 - beta) * cur[i][k] + beta * prev[i][k]);
            }
        }
        prev = cur;
    }
    out
}

/// Gate weights in `u, f, g, q` order.
pub struct LstmOracle {
    pub w_x: [Mat; 4],
    pub w_h: [Mat; 4],
    pub b_x: [Vec<f64>; 4],
    pub b_h: [Vec<f64>; 4],
}

/// Hidden states `h_1 .. h_T` of one zone's sequence, from zero states.
pub fn lstm_oracle(seq: &[Vec<f64>], p: &LstmOracle) -> Vec<Vec<f64>> {
    let h = p.b_x[0].len();
    let mut hidden = vec![0.0; h];
    let mut cell = vec![0.0; h];
    let mut out = Vec::new();
    for x in seq {
        let gate = |k: usize| -> Vec<f64> {
            let a = matvec(&p.w_x[k], x);
            let b = matvec(&p.w_h[k], &hidden);
            (0..h).map(|i| a[i] + b[i] + p.b_x[k][i] + p.b_h[k][i]).collect()
        };
        let (u, f, g, q) = (gate(0), gate(1), gate(2), gate(3));
        for i in 0..h {
            cell[i] = sigmoid(f[i]) * cell[i] + sigmoid(u[i]) * g[i].tanh();
        }
        hidden = (0..h).map(|i| sigmoid(q[i]) * cell[i].tanh()).collect();
        out.push(hidden.clone());
    }
    out
}

pub struct TpaOracle {
    /// `filtered[c][b]`.
    pub filtered: Mat,
    pub pooled: Vec<f64>,
    pub scores: Mat,
}

/// `history[row][l]` with `M F` rows, `last` of length `M F`, `filters[c][f][l]`.
pub fn tpa_oracle(history: &Mat, last: &[f64], filters: &[Mat]) -> TpaOracle {
    let m = filters.len();
    let f = filters[0].len();
    let len = filters[0][0].len();
    let filtered: Mat = (0..m)
        .map(|c| {
            (0..m)
                .map(|b| {
                    let mut acc = 0.0;
                    for ff in 0..f {
                        for l in 0..len {
                            acc += filters[c][ff][l] * history[b * f + ff][l];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();
    let pooled: Vec<f64> = (0..m).map(|b| last[b * f..(b + 1) * f].iter().sum::<f64>() / f as f64).collect();
    let scores = (0..m).map(|c| (0..m).map(|b| sigmoid(pooled[b] * filtered[c][b])).collect()).collect();
    TpaOracle {
        filtered,
        pooled,
        scores,
    }
}

/// `y = sum_c w_p[c] (sum_d w_alpha[c][d] v[d] + pooled[c])`, `v[d] = sum_b score[d][b] filtered[d][b]`.
pub fn projection_oracle(tpa: &TpaOracle, w_alpha: &Mat, w_p: &[f64]) -> f64 {
    let m = tpa.pooled.len();
    let v: Vec<f64> = (0..m)
        .map(|d| (0..m).map(|b| tpa.scores[d][b] * tpa.filtered[d][b]).sum())
        .collect();
    let mixed = matvec(w_alpha, &v);
    (0..m).map(|c| w_p[c] * (mixed[c] + tpa.pooled[c])).sum()
}

fn gates(params: &ModelParams, prefix: &str) -> [Mat; 4] {
    ["u", "f", "g", "q"].map(|k| to_mat(params.get(&format!("lstm.{prefix}{k}")).unwrap()))
}

fn biases(params: &ModelParams, prefix: &str) -> [Vec<f64>; 4] {
    ["u", "f", "g", "q"].map(|k| params.get(&format!("lstm.{prefix}{k}")).unwrap().data().to_vec())
}

/// Whole-network forecast for a full model, assembled from the oracles above.
pub fn model_oracle(config: &ModelConfig, params: &ModelParams, input: &Tensor, hoods: &[Vec<usize>]) -> Vec<f64> {
    let e = &config.embedding;
    let n = input.shape()[0];
    let conv = conv_oracle(
        input,
        params.get("conv.kernel").unwrap(),
        params.get("conv.bias").unwrap().data(),
        e.conv_stride,
    );
    let layers: Vec<Vec<HeadOracle>> = (0..e.layers)
        .map(|l| {
            (0..e.heads)
                .map(|h| HeadOracle {
                    w: to_mat(params.get(&format!("gat{l}.head{h}.w")).unwrap()),
                    a: params.get(&format!("gat{l}.head{h}.a")).unwrap().data().to_vec(),
                })
                .collect()
        })
        .collect();
    let embedded: Vec<Mat> = conv
        .iter()
        .map(|x| embed_oracle(x, &layers, hoods, e.leaky_slope, e.beta))
        .collect();
    let lstm = LstmOracle {
        w_x: gates(params, "w_u"),
        w_h: gates(params, "w_h"),
        b_x: biases(params, "b_u"),
        b_h: biases(params, "b_h"),
    };
    let filters_t = params.get("tpa.filters").unwrap();
    let (m, f, len) = (filters_t.shape()[0], filters_t.shape()[1], filters_t.shape()[2]);
    let filters: Vec<Mat> = (0..m)
        .map(|c| (0..f).map(|ff| (0..len).map(|l| filters_t.at(&[c, ff, l])).collect()).collect())
        .collect();
    let w_alpha = to_mat(params.get("tpa.w_alpha").unwrap());
    let w_p = params.get("tpa.w_p").unwrap().data().to_vec();
    (0..n)
        .map(|node| {
            let seq: Vec<Vec<f64>> = embedded.iter().map(|step| step[node].clone()).collect();
            let hs = lstm_oracle(&seq, &lstm);
            let last = hs.last().unwrap();
            // The attended history is h_0 (zero) .. h_{T-1}.
            let history: Mat = (0..last.len())
                .map(|row| (0..hs.len()).map(|l| if l == 0 { 0.0 } else { hs[l - 1][row] }).collect())
                .collect();
            let tpa = tpa_oracle(&history, last, &filters);
            projection_oracle(&tpa, &w_alpha, &w_p)
        })
        .collect()
}

/// Closed neighbourhoods of an undirected edge list, ascending.
pub fn neighborhoods(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut hoods: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for &(a, b) in edges {
        if a != b {
            hoods[a].push(b);
            hoods[b].push(a);
        }
    }
    for h in &mut hoods {
        h.sort_unstable();
        h.dedup();
    }
    hoods
}

/// Connected random graph: a random spanning tree plus extra edges.
pub fn random_edges(rng: &mut ChaCha8Rng, n: usize, extra: usize) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    for _ in 0..extra {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            edges.push((a.min(b), a.max(b)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// A few-zone, few-day experiment that trains in seconds.
pub fn tiny_experiment(seed: u64) -> (pag_core::config::ExperimentConfig, pag_core::pipeline::Dataset) {
    use pag_core::config::ExperimentConfig;
    let mut cfg = ExperimentConfig::default();
    cfg.set_seed(seed);
    cfg.market.zones = 8;
    cfg.market.days = 3;
    cfg.market.steps_per_day = 48;
    cfg.model.window = 6;
    cfg.model.embedding.heads = 2;
    cfg.horizons = vec![3];
    cfg.train.horizon = 3;
    cfg.train.batch_size = 16;
    cfg.train.max_epochs = 6;
    cfg.train.patience = 3;
    cfg.train.learning_rate = 0.005;
    cfg.train.window_stride = 2;
    cfg.meta.epochs = 3;
    cfg.meta.batch = 8;
    cfg.meta.window_stride = 2;
    cfg.impulse.magnitudes = vec![0.2];
    cfg.impulse.max_windows = 4;
    let market = pag_core::synth::generate(&cfg.market).expect("tiny market");
    (cfg, pag_core::pipeline::Dataset::from_market(&market))
}

/// Fits a fresh full model to one window for up to 500 epochs and returns
/// the final training MSE.
pub fn overfit_single_window(seed: u64) -> f64 {
    use pag_core::data::SampleWindow;
    use pag_core::exec::Execution;
    use pag_core::model::{EmbeddingConfig, PagModel};
    use pag_core::training::{fit, TrainConfig};

    let n = 5;
    let config = ModelConfig {
        embedding: EmbeddingConfig {
            heads: 2,
            ..EmbeddingConfig::default()
        },
        window: 4,
        ..ModelConfig::default()
    };
    let mut model = PagModel::init(config, seed).unwrap();
    let mut r = rng(seed);
    let window = SampleWindow {
        input_start: 0,
        horizon: 1,
        input: random_tensor(&mut r, &[n, 2, 4], 1.0),
        target: uniform(&mut r, n, 1.0),
    };
    let mask = pag_core::data::ZoneGraph::new(n, random_edges(&mut r, n, 2))
        .unwrap()
        .attention_mask();
    let cfg = TrainConfig {
        batch_size: 1,
        max_epochs: 500,
        patience: 500,
        learning_rate: 0.01,
        weight_decay: 0.0,
        seed,
        ..TrainConfig::default()
    };
    let train = [window];
    fit(&mut model, &train, &train, &cfg, &mask, Execution::Sequential).unwrap();
    model.loss(&train[0], &mask).unwrap()
}
