//! Temporal convolution followed by stacked multi-head graph attention with a
//! momentum residual.
//!
//! Node features travel as `[steps, zones, features]`; every attention op is
//! batched over the leading step axis and shares weights across steps.

use std::sync::Arc;

use crate::autodiff::{Graph, Mask, Var};
use crate::error::{PagError, Result};
use crate::model::EmbeddingConfig;
use crate::tensor::Tensor;

/// Cross-correlates each zone's `[w, F]` window with `F` output channels of
/// `[height, F]` kernels. `input` is `[N, F, w]`, `kernel` is
/// `[F_out, height, F]`, `bias` is `[F_out]`; the result is `[w', N, F_out]`.
pub fn temporal_conv(g: &mut Graph, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
    let s = g.shape(input).to_vec();
    let k = g.shape(kernel).to_vec();
    if s.len() != 3 || k.len() != 3 || k[2] != s[1] {
        return Err(PagError::shape(
            "temporal_conv",
            format!("input {s:?}, kernel {k:?}: kernel width must equal the feature count"),
        ));
    }
    if s[2] < k[1] {
        return Err(PagError::shape(
            "temporal_conv",
            format!("window {} shorter than kernel height {}", s[2], k[1]),
        ));
    }
    let x = g.permute(input, &[0, 2, 1])?; // [N, w, F]
    let y = g.conv2d(x, kernel, (stride, 1))?; // [N, F_out, w', 1]
    let (n, c, len) = (s[0], k[0], g.shape(y)[2]);
    let y = g.reshape(y, &[n, c, len])?;
    let y = g.permute(y, &[2, 0, 1])?;
    g.add_bias(y, bias)
}

/// Attention logits `e_ij = LeakyReLU(a^T [W x_i || W x_j])` for every pair,
/// batched over steps. `x` is `[T, N, F]`, `w` is `[F', F]`, `a` is `[2F']`.
/// Returns `(W x as [T, N, F'], logits as [T, N, N])`.
pub fn attention_logits(g: &mut Graph, x: Var, w: Var, a: Var, slope: f64) -> Result<(Var, Var)> {
    let sx = g.shape(x).to_vec();
    if sx.len() != 3 {
        return Err(PagError::shape("attention_logits", format!("x {sx:?}")));
    }
    let (t, n) = (sx[0], sx[1]);
    let (z, src, dst) = attention_scores(g, x, w, a)?;
    let dst = g.permute(dst, &[0, 2, 1])?; // [T, 1, N]
    let src = g.broadcast_to(src, &[t, n, n])?;
    let dst = g.broadcast_to(dst, &[t, n, n])?;
    let e = g.add(src, dst)?;
    Ok((z, g.leaky_relu(e, slope)))
}

/// Row-wise softmax of attention logits restricted to each zone's neighbourhood.
pub fn attention_coefficients(g: &mut Graph, logits: Var, mask: &Arc<Mask>) -> Result<Var> {
    g.masked_softmax(logits, Arc::clone(mask))
}

/// Parameters of one attention head.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w: Var,
    pub a: Var,
}

/// Source and destination attention scores `a_src^T W x_i`, `a_dst^T W x_j`
/// as `[T, N, 1]` each, plus `W x` as `[T, N, F']`.
fn attention_scores(g: &mut Graph, x: Var, w: Var, a: Var) -> Result<(Var, Var, Var)> {
    let fo = g.shape(w)[0];
    if g.shape(a) != [2 * fo] {
        return Err(PagError::shape(
            "attention_logits",
            format!("attention vector {:?} for {fo} output features", g.shape(a)),
        ));
    }
    let wt = g.transpose(w)?;
    let z = g.matmul(x, wt)?;
    let a_src = g.slice(a, 0, 0, fo)?;
    let a_src = g.reshape(a_src, &[fo, 1])?;
    let a_dst = g.slice(a, 0, fo, fo)?;
    let a_dst = g.reshape(a_dst, &[fo, 1])?;
    let src = g.matmul(z, a_src)?;
    let dst = g.matmul(z, a_dst)?;
    Ok((z, src, dst))
}

/// One attention head aggregated densely: logits over all pairs, masked
/// softmax, then `alpha @ Wx`. Reference for the sparse path in [`gat_layer`].
pub fn dense_head(g: &mut Graph, x: Var, head: HeadVars, mask: &Arc<Mask>, slope: f64) -> Result<Var> {
    let (z, e) = attention_logits(g, x, head.w, head.a, slope)?;
    let alpha = attention_coefficients(g, e, mask)?;
    g.matmul(alpha, z)
}

/// One attention head aggregated over each zone's neighbourhood only.
pub fn sparse_head(g: &mut Graph, x: Var, head: HeadVars, mask: &Arc<Mask>, slope: f64) -> Result<Var> {
    let (z, src, dst) = attention_scores(g, x, head.w, head.a)?;
    g.neighbor_attention(src, dst, z, Arc::clone(mask), slope)
}

/// One attention layer: `sigmoid(mean_k sum_j alpha^k_ij W^k x_j)`.
pub fn gat_layer(g: &mut Graph, x: Var, heads: &[HeadVars], mask: &Arc<Mask>, slope: f64) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &h in heads {
        let out = sparse_head(g, x, h, mask, slope)?;
        acc = Some(match acc {
            None => out,
            Some(prev) => g.add(prev, out)?,
        });
    }
    let sum = acc.ok_or_else(|| PagError::shape("gat_layer", "no heads"))?;
    let mean = g.scale(sum, 1.0 / heads.len() as f64);
    Ok(g.sigmoid(mean))
}

/// Stacked layers with the momentum residual
/// `x'' = ||_m [(1 - beta) x'^m + beta x'^{m-1}]`, `x'^0 = x`.
/// `x` is `[T, N, F]`; the result is `[T, N, M F]`.
pub fn embed(g: &mut Graph, x: Var, layers: &[Vec<HeadVars>], mask: &Arc<Mask>, cfg: &EmbeddingConfig) -> Result<Var> {
    let mut prev = x;
    let mut blocks = Vec::with_capacity(layers.len());
    for heads in layers {
        let cur = gat_layer(g, prev, heads, mask, cfg.leaky_slope)?;
        let a = g.scale(cur, 1.0 - cfg.beta);
        let b = g.scale(prev, cfg.beta);
        blocks.push(g.add(a, b)?);
        prev = cur;
    }
    g.concat(&blocks, 2)
}

/// Single-pair similarity score; a convenience over [`attention_logits`].
pub fn gat_similarity(x_i: &[f64], x_j: &[f64], w: &Tensor, a: &[f64], slope: f64) -> Result<f64> {
    let f = x_i.len();
    let mut g = Graph::new();
    let mut data = x_i.to_vec();
    data.extend_from_slice(x_j);
    let x = g.constant(Tensor::new(vec![1, 2, f], data)?);
    let wv = g.constant(w.clone());
    let av = g.constant(Tensor::vector(a.to_vec()));
    let (_, e) = attention_logits(&mut g, x, wv, av, slope)?;
    Ok(g.value(e).at(&[0, 0, 1]))
}

/// Masked softmax of one row of logits over the given neighbour indices.
pub fn gat_attention(logits: &[f64], neighborhood: &[usize]) -> Result<Vec<f64>> {
    let n = logits.len();
    let mut allowed = vec![false; n];
    for &j in neighborhood {
        allowed[j] = true;
    }
    let mut g = Graph::new();
    let e = g.constant(Tensor::new(vec![1, n], logits.to_vec())?);
    let mask = Arc::new(Mask::new(1, n, allowed)?);
    let a = g.masked_softmax(e, mask)?;
    Ok(g.value(a).data().to_vec())
}
