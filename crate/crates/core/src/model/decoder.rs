//! Recurrent decoder: an LSTM over each zone's embedded sequence, then
//! hop-wise temporal pattern attention and a two-layer linear readout.
//!
//! Zones are independent in this stage, so every op carries zones as a batch axis.

use crate::autodiff::{Graph, Var};
use crate::error::{PagError, Result};
use crate::tensor::Tensor;

/// Gate weights for input (`u`), forget (`f`), cell (`g`) and output (`q`) gates.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// Input-to-gate weights, each `[H, H]`, in `u, f, g, q` order.
    pub w_x: [Var; 4],
    /// Hidden-to-gate weights, each `[H, H]`.
    pub w_h: [Var; 4],
    pub b_x: [Var; 4],
    pub b_h: [Var; 4],
}

/// Hidden and cell states of an unrolled LSTM.
#[derive(Clone, Debug)]
pub struct LstmStates {
    /// `h_0 .. h_T`, each `[N, H]`; `h_0` is the zero initial state.
    pub hidden: Vec<Var>,
    /// `c_1 .. c_T`.
    pub cell: Vec<Var>,
}

impl LstmStates {
    pub fn last(&self) -> Var {
        *self.hidden.last().unwrap()
    }
}

/// Runs the LSTM over `seq` (`[T, N, H]`) from zero initial states.
pub fn lstm_forward(g: &mut Graph, seq: Var, p: &LstmVars) -> Result<LstmStates> {
    let s = g.shape(seq).to_vec();
    if s.len() != 3 {
        return Err(PagError::shape("lstm_forward", format!("sequence {s:?}")));
    }
    let (steps, n, h) = (s[0], s[1], s[2]);
    let wx = g.concat(&p.w_x, 0)?; // [4H, H]
    let wx = g.transpose(wx)?;
    let wh = g.concat(&p.w_h, 0)?;
    let wh = g.transpose(wh)?;
    let bx = g.concat(&p.b_x, 0)?;
    let bh = g.concat(&p.b_h, 0)?;
    let bias = g.add(bx, bh)?;
    let proj = g.matmul(seq, wx)?; // [T, N, 4H]

    let h0 = g.constant(Tensor::zeros(&[n, h]));
    let mut hidden = vec![h0];
    let mut cell: Vec<Var> = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut pre = g.select(proj, 0, t)?;
        if t > 0 {
            let rec = g.matmul(hidden[t], wh)?;
            pre = g.add(pre, rec)?;
        }
        let pre = g.add_bias(pre, bias)?;
        let u = g.slice(pre, 1, 0, h)?;
        let f = g.slice(pre, 1, h, h)?;
        let c_in = g.slice(pre, 1, 2 * h, h)?;
        let q = g.slice(pre, 1, 3 * h, h)?;
        let u = g.sigmoid(u);
        let f = g.sigmoid(f);
        let c_in = g.tanh(c_in);
        let q = g.sigmoid(q);
        let fresh = g.mul(u, c_in)?;
        let c = match cell.last() {
            Some(&prev) => {
                let kept = g.mul(f, prev)?;
                g.add(kept, fresh)?
            }
            None => fresh,
        };
        let tc = g.tanh(c);
        let ht = g.mul(q, tc)?;
        cell.push(c);
        hidden.push(ht);
    }
    Ok(LstmStates { hidden, cell })
}

/// Output of the temporal pattern attention block, all batched over zones.
#[derive(Clone, Copy, Debug)]
pub struct TpaOutput {
    /// Filtered history `[N, M(filter), M(block)]`.
    pub filtered: Var,
    /// Block-averaged last hidden state `[N, M]`.
    pub pooled: Var,
    /// Sigmoid scores `[N, M(filter), M(block)]`.
    pub scores: Var,
}

/// Scores for hop-wise / sequence-wise attention.
///
/// `history` is `[N, M F, L]` (hidden states before the last, oldest first),
/// `last` is `[N, M F]`, `filters` is `[M, F, L]`. Each filter slides over the
/// `M` feature blocks with stride `F`, and
/// `score[c, b] = sigmoid(pooled[b] * filtered[c, b])`.
pub fn tpa_scores(g: &mut Graph, history: Var, last: Var, filters: Var) -> Result<TpaOutput> {
    let hs = g.shape(history).to_vec();
    let fs = g.shape(filters).to_vec();
    if hs.len() != 3 || fs.len() != 3 || fs[2] != hs[2] || hs[1] % fs[1] != 0 || hs[1] / fs[1] != fs[0] {
        return Err(PagError::shape(
            "tpa_scores",
            format!("history {hs:?}, filters {fs:?}"),
        ));
    }
    let (n, m, f) = (hs[0], fs[0], fs[1]);
    let conv = g.conv2d(history, filters, (f, 1))?; // [N, M, M, 1]
    let filtered = g.reshape(conv, &[n, m, m])?;
    let blocks = g.reshape(last, &[n, m, f])?;
    let pooled = g.mean_axis(blocks, 2)?;
    let pb = g.reshape(pooled, &[n, 1, m])?;
    let pb = g.broadcast_to(pb, &[n, m, m])?;
    let prod = g.mul(pb, filtered)?;
    let scores = g.sigmoid(prod);
    Ok(TpaOutput {
        filtered,
        pooled,
        scores,
    })
}

/// Readout `y = W_p^T (W_alpha v + pooled)` with `v[c] = sum_b score[c,b] filtered[c,b]`.
/// `w_alpha` is `[M, M]`, `w_p` is `[M, 1]`. Returns `[N]`.
pub fn tpa_predict(g: &mut Graph, tpa: &TpaOutput, w_alpha: Var, w_p: Var) -> Result<Var> {
    let n = g.shape(tpa.pooled)[0];
    let weighted = g.mul(tpa.scores, tpa.filtered)?;
    let context = g.sum_axis(weighted, 2)?; // [N, M]
    let wt = g.transpose(w_alpha)?;
    let mixed = g.matmul(context, wt)?;
    let z = g.add(mixed, tpa.pooled)?;
    let y = g.matmul(z, w_p)?;
    g.reshape(y, &[n])
}

/// Linear head on the last hidden state, used when attention is ablated.
pub fn linear_head(g: &mut Graph, last: Var, w: Var, b: Var) -> Result<Var> {
    let n = g.shape(last)[0];
    let y = g.matmul(last, w)?;
    let y = g.add_bias(y, b)?;
    g.reshape(y, &[n])
}
