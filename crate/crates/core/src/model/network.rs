use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{value_only, Graph, Mask, Var};
use crate::data::{SampleWindow, NUM_FEATURES};
use crate::error::{PagError, Result};
use crate::model::decoder::{linear_head, lstm_forward, tpa_predict, tpa_scores, LstmVars};
use crate::model::embedding::{embed, temporal_conv, HeadVars};
use crate::model::{ModelConfig, ModelVariant};
use crate::params::{BoundParams, ModelParams};
use crate::tensor::Tensor;

const GATES: [&str; 4] = ["u", "f", "g", "q"];

/// Network definition plus its current parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PagModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl PagModel {
    /// Seeded initialisation: attention weights Glorot-uniform, everything
    /// else uniform in `±1/sqrt(fan_in)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize], bound: f64| {
            Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
        };
        let f = NUM_FEATURES;
        let e = &config.embedding;
        let hid = config.hidden();
        let m = e.layers;
        let mut p = ModelParams::new();

        let fan = (e.conv_height * f) as f64;
        p.insert("conv.kernel", uniform(&[f, e.conv_height, f], fan.sqrt().recip()));
        p.insert("conv.bias", uniform(&[f], fan.sqrt().recip()));
        if config.variant != ModelVariant::NoGat {
            let glorot_w = (6.0 / (2 * f) as f64).sqrt();
            let glorot_a = (6.0 / (2 * f + 1) as f64).sqrt();
            for layer in 0..m {
                for head in 0..e.heads {
                    p.insert(format!("gat{layer}.head{head}.w"), uniform(&[f, f], glorot_w));
                    p.insert(format!("gat{layer}.head{head}.a"), uniform(&[2 * f], glorot_a));
                }
            }
        }
        let b = (hid as f64).sqrt().recip();
        for gate in GATES {
            p.insert(format!("lstm.w_u{gate}"), uniform(&[hid, hid], b));
        }
        for gate in GATES {
            p.insert(format!("lstm.w_h{gate}"), uniform(&[hid, hid], b));
        }
        for gate in GATES {
            p.insert(format!("lstm.b_u{gate}"), uniform(&[hid], b));
        }
        for gate in GATES {
            p.insert(format!("lstm.b_h{gate}"), uniform(&[hid], b));
        }
        match config.variant {
            ModelVariant::NoTpa => {
                p.insert("head.w", uniform(&[hid, 1], b));
                p.insert("head.b", uniform(&[1], b));
            }
            _ => {
                let len = config.conv_len();
                let fb = ((f * len) as f64).sqrt().recip();
                p.insert("tpa.filters", uniform(&[m, f, len], fb));
                let mb = (m as f64).sqrt().recip();
                p.insert("tpa.w_alpha", uniform(&[m, m], mb));
                p.insert("tpa.w_p", uniform(&[m, 1], mb));
            }
        }
        Ok(PagModel { config, params: p })
    }

    /// Builds the forward graph for one window. `input` is `[N, F, w]`
    /// (normalised); the result is the `[N]` normalised occupancy forecast.
    pub fn forward(config: &ModelConfig, g: &mut Graph, p: &BoundParams, input: Var, mask: &Arc<Mask>) -> Result<Var> {
        let e = &config.embedding;
        let s = g.shape(input).to_vec();
        if s.len() != 3 || s[1] != NUM_FEATURES || s[2] != config.window {
            return Err(PagError::shape(
                "forward",
                format!("input {s:?}, expected [N, {NUM_FEATURES}, {}]", config.window),
            ));
        }
        let n = s[0];
        let x0 = temporal_conv(g, input, p.var("conv.kernel"), p.var("conv.bias"), e.conv_stride)?;
        let embedded = match config.variant {
            ModelVariant::NoGat => {
                let copies = vec![x0; e.layers];
                g.concat(&copies, 2)?
            }
            _ => {
                let layers: Vec<Vec<HeadVars>> = (0..e.layers)
                    .map(|l| {
                        (0..e.heads)
                            .map(|h| HeadVars {
                                w: p.var(&format!("gat{l}.head{h}.w")),
                                a: p.var(&format!("gat{l}.head{h}.a")),
                            })
                            .collect()
                    })
                    .collect();
                embed(g, x0, &layers, mask, e)?
            }
        };
        let gate = |prefix: &str| GATES.map(|k| p.var(&format!("lstm.{prefix}{k}")));
        let lstm = LstmVars {
            w_x: gate("w_u"),
            w_h: gate("w_h"),
            b_x: gate("b_u"),
            b_h: gate("b_h"),
        };
        let states = lstm_forward(g, embedded, &lstm)?;
        let last = states.last();
        match config.variant {
            ModelVariant::NoTpa => linear_head(g, last, p.var("head.w"), p.var("head.b")),
            _ => {
                let steps = states.hidden.len() - 1;
                let history = g.stack(&states.hidden[..steps], 2)?; // [N, H, L]
                debug_assert_eq!(g.shape(history)[0], n);
                let tpa = tpa_scores(g, history, last, p.var("tpa.filters"))?;
                tpa_predict(g, &tpa, p.var("tpa.w_alpha"), p.var("tpa.w_p"))
            }
        }
    }

    /// Mean squared error of one (normalised) window.
    pub fn sample_loss(config: &ModelConfig, g: &mut Graph, p: &BoundParams, window: &SampleWindow, mask: &Arc<Mask>) -> Result<Var> {
        let x = g.constant(window.input.clone());
        let y = Self::forward(config, g, p, x, mask)?;
        let target = g.constant(Tensor::vector(window.target.clone()));
        mse(g, y, target)
    }

    /// Normalised forecast for one window.
    pub fn predict(&self, window: &SampleWindow, mask: &Arc<Mask>) -> Result<Vec<f64>> {
        predict_with(&self.config, &self.params, &window.input, mask)
    }

    pub fn loss(&self, window: &SampleWindow, mask: &Arc<Mask>) -> Result<f64> {
        value_only(&self.params, |g, p| Self::sample_loss(&self.config, g, p, window, mask))
    }
}

/// Forecast with explicit parameters, without recording gradients of interest.
pub fn predict_with(config: &ModelConfig, params: &ModelParams, input: &Tensor, mask: &Arc<Mask>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let x = g.constant(input.clone());
    let y = PagModel::forward(config, &mut g, &p, x, mask)?;
    Ok(g.value(y).data().to_vec())
}

/// Mean of squared differences.
pub fn mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(PagError::shape(
            "mse_loss",
            format!("{:?} vs {:?}", g.shape(pred), g.shape(target)),
        ));
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}
