//! Define-by-run reverse-mode differentiation over small dense tensors.
//!
//! Every op evaluates eagerly when it is appended, so the node list is already
//! in topological order. `backward` walks it once in reverse.

use std::sync::Arc;

use crate::error::{PagError, Result};
use crate::tensor::{strides, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean mask over the last two axes of a softmax input.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
    lists: Vec<Vec<usize>>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(PagError::shape(
                "mask",
                format!("{rows}x{cols} mask needs {} entries", rows * cols),
            ));
        }
        let lists = allowed
            .chunks(cols.max(1))
            .map(|row| (0..cols).filter(|&j| row[j]).collect())
            .collect();
        Ok(Mask {
            rows,
            cols,
            allowed,
            lists,
        })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Mask::new(rows, cols, vec![true; rows * cols]).expect("full mask is consistent")
    }

    /// Allowed columns of `row`, ascending.
    pub fn row_indices(&self, row: usize) -> &[usize] {
        &self.lists[row]
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    MaskedSoftmax(Var, Arc<Mask>),
    NeighborAttention {
        src: Var,
        dst: Var,
        z: Var,
        mask: Arc<Mask>,
        slope: f64,
        alpha: Vec<f64>,
    },
    Sum(Var),
    SumAxis(Var, usize),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: (usize, usize),
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A computation graph (the gradient tape) plus its parameter-leaf registry.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
    params: Vec<Var>,
    shapes: Vec<Vec<usize>>,
}

impl Adjoints {
    /// Gradient of the root with respect to `var`; zeros when unreachable.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    /// Gradients for every registered parameter leaf, in registration order.
    pub fn params(&self) -> Vec<Tensor> {
        self.params.iter().map(|&v| self.wrt(v)).collect()
    }

    /// Like [`Adjoints::params`] but moves the tensors out.
    pub fn into_params(mut self) -> Vec<Tensor> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .map(|v| {
                self.grads[v.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
            })
            .collect()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(PagError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(PagError::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Cached forward value of a node.
    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Forward value of `root`. Values are computed eagerly, so this only reads the cache.
    pub fn forward(&self, root: Var) -> &Tensor {
        self.value(root)
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Constant input leaf; never receives a parameter gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Learnable leaf, registered for [`Adjoints::params`].
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Param, value);
        self.params.push(v);
        v
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Matrix product over the last two axes. `b` is either a shared `[k, n]`
    /// matrix or carries the same leading batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(PagError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let shared = sb.len() == 2;
        if k != k2 || (!shared && batch_a != &sb[..sb.len() - 2]) {
            return Err(PagError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let batch: usize = batch_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (av.data(), bv.data());
        for bi in 0..batch {
            let a0 = bi * m * k;
            let b0 = if shared { 0 } else { bi * k * n };
            let o0 = bi * m * n;
            for i in 0..m {
                let orow = &mut out[o0 + i * n..o0 + (i + 1) * n];
                for p in 0..k {
                    let x = ad[a0 + i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bd[b0 + p * n..b0 + (p + 1) * n];
                    for (o, &y) in orow.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let mut value = av.clone();
        value.add_assign(bv);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", av, bv)?;
        let mut value = av.clone();
        value.axpy(-1.0, bv);
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// Adds a vector along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = *av.shape().last().unwrap();
        if bv.rank() != 1 || bv.len() != n {
            return Err(PagError::shape(
                "add_bias",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut value = av.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        Ok(self.push(Op::AddBias(a, bias), value))
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), value)
    }

    /// Numpy-style broadcast of unit axes to `shape` (ranks must agree).
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let sa = av.shape();
        if sa.len() != shape.len() || sa.iter().zip(shape).any(|(&x, &y)| x != y && x != 1) {
            return Err(PagError::shape(
                "broadcast_to",
                format!("{sa:?} -> {shape:?}"),
            ));
        }
        let in_strides = strides(sa);
        let eff: Vec<usize> = sa
            .iter()
            .zip(&in_strides)
            .map(|(&d, &s)| if d == 1 { 0 } else { s })
            .collect();
        let mut out = Vec::with_capacity(shape.iter().product());
        for_each_row(shape, &eff, |base, step, len| {
            out.extend((0..len).map(|k| av.data()[base + k * step]));
        });
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(Op::BroadcastTo(a), value))
    }

    /// Concatenation along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| PagError::shape("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(PagError::shape("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let blk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Concat(parts.to_vec(), axis), value))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| PagError::shape("stack", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis > base.len() {
            return Err(PagError::shape("stack", format!("axis {axis} for {base:?}")));
        }
        let mut unit = base.clone();
        unit.insert(axis, 1);
        let mut expanded = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).shape() != base.as_slice() {
                return Err(PagError::shape(
                    "stack",
                    format!("{base:?} vs {:?}", self.value(p).shape()),
                ));
            }
            expanded.push(self.reshape(p, &unit)?);
        }
        self.concat(&expanded, axis)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let sa = av.shape().to_vec();
        check_axis("slice", &sa, axis)?;
        if len == 0 || start + len > sa[axis] {
            return Err(PagError::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {sa:?}", start + len),
            ));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sa[axis] + start) * inner;
            out.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Slice(a, axis, start), value))
    }

    /// Index `idx` along `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, idx: usize) -> Result<Var> {
        let s = self.slice(a, axis, idx, 1)?;
        let mut shape = self.value(s).shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.reshape(s, &shape)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let value = permute_tensor(av, perm)?;
        Ok(self.push(Op::Permute(a, perm.to_vec()), value))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(PagError::shape("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    /// Softmax over the last axis, normalised only over entries the mask
    /// allows; disallowed entries are exactly zero. The mask covers the last
    /// two axes and is shared by any leading batch axes.
    pub fn masked_softmax(&mut self, a: Var, mask: Arc<Mask>) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if s.len() < 2 || s[s.len() - 2] != mask.rows || s[s.len() - 1] != mask.cols {
            return Err(PagError::shape(
                "masked_softmax",
                format!("{s:?} with {}x{} mask", mask.rows, mask.cols),
            ));
        }
        let (rows, cols) = (mask.rows, mask.cols);
        let mut out = vec![0.0; av.len()];
        for (r, (xin, xout)) in av
            .data()
            .chunks(cols)
            .zip(out.chunks_mut(cols))
            .enumerate()
        {
            let row = r % rows;
            let allowed = &mask.allowed[row * cols..(row + 1) * cols];
            let mx = xin
                .iter()
                .zip(allowed)
                .filter(|(_, &ok)| ok)
                .fold(f64::NEG_INFINITY, |m, (&x, _)| m.max(x));
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for ((o, &x), &ok) in xout.iter_mut().zip(xin).zip(allowed) {
                if ok {
                    *o = (x - mx).exp();
                    total += *o;
                }
            }
            xout.iter_mut().for_each(|o| *o /= total);
        }
        let value = Tensor::new(s.to_vec(), out)?;
        Ok(self.push(Op::MaskedSoftmax(a, mask), value))
    }

    /// Fused sparse graph attention. With `src`, `dst` of shape `[T, N, 1]`
    /// and `z` of shape `[T, N, F]`, returns `out[t, i] = sum_j alpha_tij z[t, j]`
    /// where `alpha_ti` is the softmax of `LeakyRelu(src[t, i] + dst[t, j])`
    /// over the columns `j` the `N x N` mask allows in row `i`. Equivalent to
    /// broadcasting, `leaky_relu`, `masked_softmax` and `matmul`, but only
    /// touches allowed pairs.
    pub fn neighbor_attention(&mut self, src: Var, dst: Var, z: Var, mask: Arc<Mask>, slope: f64) -> Result<Var> {
        let sz = self.value(z).shape().to_vec();
        let ok = sz.len() == 3
            && self.value(src).shape() == [sz[0], sz[1], 1]
            && self.value(dst).shape() == [sz[0], sz[1], 1]
            && mask.rows == sz[1]
            && mask.cols == sz[1];
        if !ok {
            return Err(PagError::shape(
                "neighbor_attention",
                format!(
                    "src {:?}, dst {:?}, z {sz:?}, {}x{} mask",
                    self.value(src).shape(),
                    self.value(dst).shape(),
                    mask.rows,
                    mask.cols
                ),
            ));
        }
        let (t, n, f) = (sz[0], sz[1], sz[2]);
        let (sv, dv, zv) = (self.value(src).data(), self.value(dst).data(), self.value(z).data());
        let mut alpha = Vec::with_capacity(t * mask.allowed.iter().filter(|&&x| x).count());
        let mut out = vec![0.0; t * n * f];
        for b in 0..t {
            for i in 0..n {
                let cols = &mask.lists[i];
                if cols.is_empty() {
                    continue;
                }
                let start = alpha.len();
                let si = sv[b * n + i];
                let mut mx = f64::NEG_INFINITY;
                for &j in cols {
                    let e = si + dv[b * n + j];
                    let e = if e > 0.0 { e } else { slope * e };
                    mx = mx.max(e);
                    alpha.push(e);
                }
                let row = &mut alpha[start..];
                let mut total = 0.0;
                for a in row.iter_mut() {
                    *a = (*a - mx).exp();
                    total += *a;
                }
                let o = &mut out[(b * n + i) * f..(b * n + i + 1) * f];
                for (a, &j) in row.iter_mut().zip(cols) {
                    *a /= total;
                    let zj = &zv[(b * n + j) * f..(b * n + j + 1) * f];
                    for (ok, &zk) in o.iter_mut().zip(zj) {
                        *ok += *a * zk;
                    }
                }
            }
        }
        let value = Tensor::new(sz, out)?;
        Ok(self.push(
            Op::NeighborAttention {
                src,
                dst,
                z,
                mask,
                slope,
                alpha,
            },
            value,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let sa = av.shape().to_vec();
        check_axis("sum_axis", &sa, axis)?;
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let d = sa[axis];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..d {
                let src = &av.data()[(o * d + k) * inner..(o * d + k + 1) * inner];
                for (y, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *y += x;
                }
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::SumAxis(a, axis), value))
    }

    /// Average pooling over `axis`.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let d = {
            let s = self.value(a).shape();
            check_axis("mean_axis", s, axis)?;
            s[axis]
        };
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / d as f64))
    }

    /// Valid 2-D cross-correlation. `input` is `[batch, height, width]`,
    /// `kernel` is `[channels, kh, kw]`; the result is
    /// `[batch, channels, out_h, out_w]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: (usize, usize)) -> Result<Var> {
        let (iv, kv) = (self.value(input), self.value(kernel));
        let (si, sk) = (iv.shape(), kv.shape());
        if si.len() != 3 || sk.len() != 3 || stride.0 == 0 || stride.1 == 0 {
            return Err(PagError::shape("conv2d", format!("{si:?} * {sk:?}")));
        }
        let (b, h, w) = (si[0], si[1], si[2]);
        let (c, kh, kw) = (sk[0], sk[1], sk[2]);
        if kh > h || kw > w {
            return Err(PagError::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than input {h}x{w}"),
            ));
        }
        let (oh, ow) = ((h - kh) / stride.0 + 1, (w - kw) / stride.1 + 1);
        let (id, kd) = (iv.data(), kv.data());
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for u in 0..kh {
                            let irow = bi * h * w + (y * stride.0 + u) * w + x * stride.1;
                            let krow = ci * kh * kw + u * kw;
                            for v in 0..kw {
                                acc += id[irow + v] * kd[krow + v];
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                stride,
            },
            value,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Adjoints> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(PagError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = matmul_backward(self.value(*a), self.value(*b), &g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = hadamard(&g, self.value(*b));
                    let gb = hadamard(&g, self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(a, bias) => {
                    let n = self.value(*bias).len();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (s, x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    accumulate(&mut grads, *bias, Tensor::vector(gb));
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|x| x * s));
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::BroadcastTo(a) => {
                    let src = self.value(*a).shape().to_vec();
                    let ga = reduce_broadcast(&g, &src);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts, axis) => {
                    let axis = *axis;
                    let shape = g.shape().to_vec();
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let ps = self.value(p).shape().to_vec();
                        let blk = ps[axis] * inner;
                        let mut out = Vec::with_capacity(outer * blk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            out.extend_from_slice(&g.data()[base..base + blk]);
                        }
                        offset += blk;
                        accumulate(&mut grads, p, Tensor::new(ps, out)?);
                    }
                }
                Op::Slice(a, axis, start) => {
                    let sa = self.value(*a).shape().to_vec();
                    let (axis, start) = (*axis, *start);
                    let len = g.shape()[axis];
                    let outer: usize = sa[..axis].iter().product();
                    let inner: usize = sa[axis + 1..].iter().product();
                    let mut ga = Tensor::zeros(&sa);
                    for o in 0..outer {
                        let dst = (o * sa[axis] + start) * inner;
                        let src = o * len * inner;
                        ga.data_mut()[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let sa = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.reshaped(&sa)?);
                }
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (d, &p) in perm.iter().enumerate() {
                        inv[p] = d;
                    }
                    accumulate(&mut grads, *a, permute_tensor(&g, &inv)?);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { slope * gi })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gi, &yi)| gi * yi * (1.0 - yi))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gi, &yi)| gi * (1.0 - yi * yi))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::MaskedSoftmax(a, mask) => {
                    let y = &node.value;
                    let cols = mask.cols;
                    let mut out = vec![0.0; y.len()];
                    for ((yr, gr), or) in y
                        .data()
                        .chunks(cols)
                        .zip(g.data().chunks(cols))
                        .zip(out.chunks_mut(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yi), &gi) in or.iter_mut().zip(yr).zip(gr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(y.shape().to_vec(), out)?);
                }
                Op::NeighborAttention {
                    src,
                    dst,
                    z,
                    mask,
                    slope,
                    alpha,
                } => {
                    let sz = self.value(*z).shape();
                    let (t, n, f) = (sz[0], sz[1], sz[2]);
                    let (sv, dv, zv) = (self.value(*src).data(), self.value(*dst).data(), self.value(*z).data());
                    let gd = g.data();
                    let mut gs = vec![0.0; t * n];
                    let mut gdst = vec![0.0; t * n];
                    let mut gz = vec![0.0; t * n * f];
                    let mut k = 0;
                    let mut dalpha = Vec::with_capacity(n);
                    for b in 0..t {
                        for i in 0..n {
                            let cols = &mask.lists[i];
                            let row = &alpha[k..k + cols.len()];
                            k += cols.len();
                            let gi = &gd[(b * n + i) * f..(b * n + i + 1) * f];
                            dalpha.clear();
                            for (&a, &j) in row.iter().zip(cols) {
                                let zj = &zv[(b * n + j) * f..(b * n + j + 1) * f];
                                dalpha.push(gi.iter().zip(zj).map(|(x, y)| x * y).sum::<f64>());
                                for (o, &x) in gz[(b * n + j) * f..(b * n + j + 1) * f].iter_mut().zip(gi) {
                                    *o += a * x;
                                }
                            }
                            let dot: f64 = row.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
                            let si = sv[b * n + i];
                            for ((&a, &da), &j) in row.iter().zip(&dalpha).zip(cols) {
                                let de = a * (da - dot);
                                let pre = si + dv[b * n + j];
                                let dp = if pre > 0.0 { de } else { *slope * de };
                                gs[b * n + i] += dp;
                                gdst[b * n + j] += dp;
                            }
                        }
                    }
                    let shape = self.value(*src).shape().to_vec();
                    accumulate(&mut grads, *z, Tensor::new(sz.to_vec(), gz)?);
                    accumulate(&mut grads, *dst, Tensor::new(shape.clone(), gdst)?);
                    accumulate(&mut grads, *src, Tensor::new(shape, gs)?);
                }
                Op::Sum(a) => {
                    let s = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::full(&s, g.item()));
                }
                Op::SumAxis(a, axis) => {
                    let sa = self.value(*a).shape().to_vec();
                    let axis = *axis;
                    let outer: usize = sa[..axis].iter().product();
                    let inner: usize = sa[axis + 1..].iter().product();
                    let d = sa[axis];
                    let mut out = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let row = &g.data()[o * inner..(o + 1) * inner];
                        for _ in 0..d {
                            out.extend_from_slice(row);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(sa, out)?);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                } => {
                    let (gi, gk) = conv2d_backward(self.value(*input), self.value(*kernel), *stride, &g);
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *kernel, gk);
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Adjoints {
            grads,
            params: self.params.clone(),
            shapes,
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("hadamard shapes agree")
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    let n: usize = shape.iter().product();
    let mut idx = vec![0; shape.len()];
    for _ in 0..n {
        f(&idx);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Walks `shape` in row-major order one last-axis row at a time, passing the
/// strided source offset of the row start, the last-axis source stride and
/// the row length.
fn for_each_row(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let r = shape.len();
    let (len, step) = (shape[r - 1], src_strides[r - 1]);
    for_each_index(&shape[..r - 1], |idx| {
        let base: usize = idx.iter().zip(src_strides).map(|(i, s)| i * s).sum();
        f(base, step, len);
    });
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let s = t.shape();
    let mut seen = vec![false; s.len()];
    if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
        return Err(PagError::shape("permute", format!("{perm:?} for {s:?}")));
    }
    let in_strides = strides(s);
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(t.len());
    for_each_row(&out_shape, &gather, |base, step, len| {
        out.extend((0..len).map(|k| t.data()[base + k * step]));
    });
    Tensor::new(out_shape, out)
}

fn reduce_broadcast(g: &Tensor, src: &[usize]) -> Tensor {
    let in_strides = strides(src);
    let eff: Vec<usize> = src
        .iter()
        .zip(&in_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let mut out = Tensor::zeros(src);
    let mut k = 0;
    for_each_row(g.shape(), &eff, |base, step, len| {
        let o = out.data_mut();
        for (j, &gv) in g.data()[k..k + len].iter().enumerate() {
            o[base + j * step] += gv;
        }
        k += len;
    });
    out
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (sa, sb) = (a.shape(), b.shape());
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let n = sb[sb.len() - 1];
    let shared = sb.len() == 2;
    let batch: usize = sa[..sa.len() - 2].iter().product();
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    for bi in 0..batch {
        let a0 = bi * m * k;
        let b0 = if shared { 0 } else { bi * k * n };
        let g0 = bi * m * n;
        for i in 0..m {
            let grow = &gd[g0 + i * n..g0 + (i + 1) * n];
            for p in 0..k {
                let brow = &bd[b0 + p * n..b0 + (p + 1) * n];
                ga[a0 + i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                let x = ad[a0 + i * k + p];
                if x != 0.0 {
                    for (o, &gv) in gb[b0 + p * n..b0 + (p + 1) * n].iter_mut().zip(grow) {
                        *o += x * gv;
                    }
                }
            }
        }
    }
    (
        Tensor::new(sa.to_vec(), ga).expect("shape"),
        Tensor::new(sb.to_vec(), gb).expect("shape"),
    )
}

fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize),
    g: &Tensor,
) -> (Tensor, Tensor) {
    let (si, sk) = (input.shape(), kernel.shape());
    let (b, h, w) = (si[0], si[1], si[2]);
    let (c, kh, kw) = (sk[0], sk[1], sk[2]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let (id, kd, gd) = (input.data(), kernel.data(), g.data());
    let mut gi = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let go = gd[((bi * c + ci) * oh + y) * ow + x];
                    if go == 0.0 {
                        continue;
                    }
                    for u in 0..kh {
                        let irow = bi * h * w + (y * stride.0 + u) * w + x * stride.1;
                        let krow = ci * kh * kw + u * kw;
                        for v in 0..kw {
                            gi[irow + v] += go * kd[krow + v];
                            gk[krow + v] += go * id[irow + v];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(si.to_vec(), gi).expect("shape"),
        Tensor::new(sk.to_vec(), gk).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(Tensor::identity(2));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn concat_vectors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0]));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(a);
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let adj = g.backward(y).unwrap();
        assert_eq!(adj.wrt(x).item(), 6.0);
    }

    #[test]
    fn linear_weight_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_fn(&[2, 2], |k| k as f64 + 1.0));
        let x = g.constant(t(&[2, 1], &[1.0, 0.0]));
        let y = g.matmul(w, x).unwrap();
        let s = g.sum(y);
        let dw = g.backward(s).unwrap().wrt(w);
        assert_eq!(dw.data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn leaky_relu_negative_branch() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(-2.0));
        let y = g.leaky_relu(x, 0.01);
        let d = g.backward(y).unwrap().wrt(x).item();
        assert!((d - 0.01).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(PagError::NonScalarRoot(_))));
    }

    #[test]
    fn shape_error_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let c = g.constant(Tensor::zeros(&[3]));
        let err = g.mul(a, c).unwrap_err();
        assert!(err.to_string().contains("mul"), "{err}");
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(x * x) + sum(3x) => dy/dx = 2x + 3
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0]));
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0);
        let s = g.add(sq, lin).unwrap();
        let y = g.sum(s);
        let dx = g.backward(y).unwrap().wrt(x);
        assert_eq!(dx.data(), &[5.0, -1.0]);
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[0.0, 3f64.ln(), 9.0, 1.0, 1.0, 1.0]));
        let mask = Arc::new(Mask::new(2, 3, vec![true, true, false, true, true, true]).unwrap());
        let y = g.masked_softmax(x, mask).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);
        assert_eq!(v[2], 0.0);
        for k in 3..6 {
            assert!((v[k] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |k| k as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        assert_eq!(g.value(p).at(&[3, 1, 2]), g.value(x).at(&[1, 2, 3]));
        let q = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(q), g.value(x));
    }

    #[test]
    fn conv2d_matches_manual_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 3, 2], |k| k as f64));
        let k = g.constant(t(&[1, 2, 2], &[1.0, 1.0, 1.0, 1.0]));
        let y = g.conv2d(x, k, (1, 1)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 1]);
        assert_eq!(g.value(y).data(), &[6.0, 14.0]);
    }
}
