//! The reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward visits it once in reverse.

use super::kernels::{self, ConvDims, ConvGeom, PoolDims, PoolGeom};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{DassError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel batch statistics observed by a training-mode batch norm.
/// `var` is the unbiased estimate used for running averages.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    AddN(Vec<Var>),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        dims: ConvDims,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        fan_in: usize,
        fan_out: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f32>,
        invstd: Vec<f32>,
        batch_stats: bool,
        n: usize,
        c: usize,
        hw: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        dims: PoolDims,
        geom: PoolGeom,
    },
    GlobalAvgPool {
        x: Var,
        hw: usize,
    },
    Concat {
        inputs: Vec<Var>,
        channels: Vec<usize>,
        n: usize,
        hw: usize,
    },
    Crop {
        x: Var,
        planes: usize,
        w: usize,
        top: usize,
        left: usize,
        oh: usize,
        ow: usize,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    WeightedSum {
        weights: Var,
        offset: usize,
        terms: Vec<(usize, Var)>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
        k: usize,
    },
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A single-use computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(Var, ParamId)>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn apply_to(&self, store: &mut ParamStore) {
        for (var, id) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                store.accumulate_grad(*id, g.data());
            }
        }
    }
}

fn nchw(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Some((n, c, h, w)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(DassError::Tape("tape already consumed by backward".into()))
        } else {
            Ok(())
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Result<Var> {
        self.check_live()?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A detached value; it never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false, None)
    }

    /// A free input that receives gradient.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true, None)
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, requires_grad: bool) -> Result<Var> {
        self.leaf(store.value(id).clone(), requires_grad, Some(id))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(DassError::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        self.check_live()?;
        let src = self.value(a);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x * factor).collect())?;
        Ok(self.push(t, Op::Scale(a, factor), &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        self.check_live()?;
        let src = self.value(a);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x + c).collect())?;
        Ok(self.push(t, Op::AddScalar(a), &[a]))
    }

    /// Elementwise sum of one or more same-shape values.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        self.check_live()?;
        let first = *terms
            .first()
            .ok_or_else(|| DassError::Invalid("add_n needs at least one term".into()))?;
        for &t in &terms[1..] {
            self.same_shape("add_n", first, t)?;
        }
        let mut data = self.value(first).data().to_vec();
        for &t in &terms[1..] {
            for (a, b) in data.iter_mut().zip(self.value(t).data()) {
                *a += b;
            }
        }
        let t = Tensor::new(self.value(first).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddN(terms.to_vec()), terms))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let src = self.value(a);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x.max(0.0)).collect())?;
        Ok(self.push(t, Op::Relu(a), &[a]))
    }

    /// 2-D convolution, NCHW input and `[out, in / groups, kh, kw]` weight.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        self.check_live()?;
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let err = || DassError::shape("conv2d", xs, ws);
        let (n, c, h, wd) = nchw(xs).ok_or_else(err)?;
        let (oc, icpg, kh, kw) = nchw(ws).ok_or_else(err)?;
        if geom.groups == 0 || c % geom.groups != 0 || oc % geom.groups != 0 || icpg != c / geom.groups {
            return Err(err());
        }
        let oh = kernels::out_size(h, kh, geom.stride, geom.pad, geom.dilation).ok_or_else(err)?;
        let ow = kernels::out_size(wd, kw, geom.stride, geom.pad, geom.dilation).ok_or_else(err)?;
        let dims = ConvDims { n, c, h, w: wd, oc, kh, kw, oh, ow };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &dims, &geom);
        let t = Tensor::new(vec![n, oc, oh, ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, dims, geom }, &[x, w]))
    }

    /// `x @ w^T + b` with `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check_live()?;
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let (batch, fan_in, fan_out) = match (xs, ws) {
            ([bt, i], [o, i2]) if i == i2 => (*bt, *i, *o),
            _ => return Err(DassError::shape("linear", xs, ws)),
        };
        if let Some(b) = b {
            if self.value(b).shape() != [fan_out] {
                return Err(DassError::shape("linear bias", self.value(b).shape(), &[fan_out]));
            }
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0f32; batch * fan_out];
        for r in 0..batch {
            let xr = &xd[r * fan_in..(r + 1) * fan_in];
            for o in 0..fan_out {
                let wr = &wd[o * fan_in..(o + 1) * fan_in];
                let mut acc = 0.0f32;
                for (a, c) in xr.iter().zip(wr) {
                    acc += a * c;
                }
                out[r * fan_out + o] = acc;
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..batch {
                for o in 0..fan_out {
                    out[r * fan_out + o] += bd[o];
                }
            }
        }
        let t = Tensor::new(vec![batch, fan_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Linear { x, w, b, batch, fan_in, fan_out }, &inputs))
    }

    fn bn_layout(&self, x: Var) -> Result<(usize, usize, usize)> {
        let s = self.value(x).shape();
        match *s {
            [n, c, h, w] => Ok((n, c, h * w)),
            [n, c] => Ok((n, c, 1)),
            _ => Err(DassError::shape("batch_norm", s, &[])),
        }
    }

    fn check_channel_param(&self, p: Option<Var>, c: usize) -> Result<()> {
        if let Some(p) = p {
            if self.value(p).shape() != [c] {
                return Err(DassError::shape("batch_norm affine", self.value(p).shape(), &[c]));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_finish(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f32>,
        invstd: Vec<f32>,
        batch_stats: bool,
        (n, c, hw): (usize, usize, usize),
    ) -> Result<Var> {
        let mut y = xhat.clone();
        if gamma.is_some() || beta.is_some() {
            let g = gamma.map(|v| self.value(v).data().to_vec());
            let b = beta.map(|v| self.value(v).data().to_vec());
            for ni in 0..n {
                for ci in 0..c {
                    let gv = g.as_ref().map_or(1.0, |g| g[ci]);
                    let bv = b.as_ref().map_or(0.0, |b| b[ci]);
                    for v in &mut y[(ni * c + ci) * hw..][..hw] {
                        *v = *v * gv + bv;
                    }
                }
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), y)?;
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        Ok(self.push(
            t,
            Op::BatchNorm { x, gamma, beta, xhat, invstd, batch_stats, n, c, hw },
            &inputs,
        ))
    }

    /// Batch norm over the batch and spatial axes using the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f32) -> Result<(Var, BnStats)> {
        self.check_live()?;
        let (n, c, hw) = self.bn_layout(x)?;
        self.check_channel_param(gamma, c)?;
        self.check_channel_param(beta, c)?;
        let xd = self.value(x).data();
        let m = (n * hw) as f32;
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ci in 0..c {
            let mut s = 0.0f32;
            for ni in 0..n {
                for v in &xd[(ni * c + ci) * hw..][..hw] {
                    s += v;
                }
            }
            let mu = s / m;
            let mut sq = 0.0f32;
            for ni in 0..n {
                for v in &xd[(ni * c + ci) * hw..][..hw] {
                    sq += (v - mu) * (v - mu);
                }
            }
            mean[ci] = mu;
            var[ci] = sq / m;
        }
        let invstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0f32; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for j in 0..hw {
                    xhat[base + j] = (xd[base + j] - mean[ci]) * invstd[ci];
                }
            }
        }
        let unbiased = if m > 1.0 {
            var.iter().map(|v| v * m / (m - 1.0)).collect()
        } else {
            var.clone()
        };
        let out = self.bn_finish(x, gamma, beta, xhat, invstd, true, (n, c, hw))?;
        Ok((out, BnStats { mean, var: unbiased }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        self.check_live()?;
        let (n, c, hw) = self.bn_layout(x)?;
        self.check_channel_param(gamma, c)?;
        self.check_channel_param(beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(DassError::shape("batch_norm running stats", &[mean.len(), var.len()], &[c]));
        }
        let invstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let mut xhat = vec![0.0f32; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for j in 0..hw {
                    xhat[base + j] = (xd[base + j] - mean[ci]) * invstd[ci];
                }
            }
        }
        self.bn_finish(x, gamma, beta, xhat, invstd, false, (n, c, hw))
    }

    fn pool_dims(&self, op: &'static str, x: Var, g: &PoolGeom) -> Result<PoolDims> {
        let s = self.value(x).shape();
        let (n, c, h, w) = nchw(s).ok_or_else(|| DassError::shape(op, s, &[g.kernel, g.kernel]))?;
        let oh = kernels::out_size(h, g.kernel, g.stride, g.pad, 1);
        let ow = kernels::out_size(w, g.kernel, g.stride, g.pad, 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if g.pad < g.kernel => Ok(PoolDims { planes: n * c, h, w, oh, ow }),
            _ => Err(DassError::shape(op, s, &[g.kernel, g.kernel])),
        }
    }

    pub fn max_pool(&mut self, x: Var, geom: PoolGeom) -> Result<Var> {
        self.check_live()?;
        let d = self.pool_dims("max_pool", x, &geom)?;
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), &d, &geom);
        let s = self.value(x).shape();
        let t = Tensor::new(vec![s[0], s[1], d.oh, d.ow], out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn avg_pool(&mut self, x: Var, geom: PoolGeom) -> Result<Var> {
        self.check_live()?;
        let d = self.pool_dims("avg_pool", x, &geom)?;
        let out = kernels::avg_pool_forward(self.value(x).data(), &d, &geom);
        let s = self.value(x).shape();
        let t = Tensor::new(vec![s[0], s[1], d.oh, d.ow], out)?;
        Ok(self.push(t, Op::AvgPool { x, dims: d, geom }, &[x]))
    }

    /// `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let s = self.value(x).shape();
        let (n, c, h, w) = nchw(s).ok_or_else(|| DassError::shape("global_avg_pool", s, &[]))?;
        let hw = h * w;
        let xd = self.value(x).data();
        let out = (0..n * c)
            .map(|p| xd[p * hw..(p + 1) * hw].iter().sum::<f32>() / hw as f32)
            .collect();
        let t = Tensor::new(vec![n, c], out)?;
        Ok(self.push(t, Op::GlobalAvgPool { x, hw }, &[x]))
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        self.check_live()?;
        let first = *inputs
            .first()
            .ok_or_else(|| DassError::Invalid("concat needs at least one input".into()))?;
        let s0 = self.value(first).shape().to_vec();
        if s0.len() < 2 {
            return Err(DassError::shape("concat", &s0, &[]));
        }
        let n = s0[0];
        let rest = &s0[2..];
        let hw: usize = rest.iter().product();
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != s0.len() || s[0] != n || &s[2..] != rest {
                return Err(DassError::shape("concat", &s0, s));
            }
            channels.push(s[1]);
        }
        let total: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(n * total * hw);
        for ni in 0..n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[ni * c * hw..(ni + 1) * c * hw]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), channels, n, hw }, inputs))
    }

    /// Drops the first `top` rows and `left` columns of every plane.
    pub fn crop(&mut self, x: Var, top: usize, left: usize) -> Result<Var> {
        self.check_live()?;
        let s = self.value(x).shape();
        let (n, c, h, w) = nchw(s).ok_or_else(|| DassError::shape("crop", s, &[top, left]))?;
        if top >= h || left >= w {
            return Err(DassError::shape("crop", s, &[top, left]));
        }
        let (oh, ow) = (h - top, w - left);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for r in 0..oh {
                let start = p * h * w + (r + top) * w + left;
                out.extend_from_slice(&xd[start..start + ow]);
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(t, Op::Crop { x, planes: n * c, w, top, left, oh, ow }, &[x]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let src = self.value(x);
        let cols = *src.shape().last().unwrap_or(&1);
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0f32;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { x, cols }, &[x]))
    }

    /// `sum_i weights[offset + i_k] * terms_k` over `(i_k, term_k)` pairs.
    pub fn weighted_sum(&mut self, weights: Var, offset: usize, terms: &[(usize, Var)]) -> Result<Var> {
        self.check_live()?;
        let (_, first) = *terms
            .first()
            .ok_or_else(|| DassError::Invalid("weighted_sum needs at least one term".into()))?;
        let nw = self.value(weights).numel();
        for &(i, t) in terms {
            self.same_shape("weighted_sum", first, t)?;
            if offset + i >= nw {
                return Err(DassError::shape("weighted_sum weights", self.value(weights).shape(), &[offset + i]));
            }
        }
        let wd = self.value(weights).data();
        let mut out = vec![0.0f32; self.value(first).numel()];
        for &(i, t) in terms {
            let wv = wd[offset + i];
            for (o, v) in out.iter_mut().zip(self.value(t).data()) {
                *o += wv * v;
            }
        }
        let t = Tensor::new(self.value(first).shape().to_vec(), out)?;
        let mut inputs = vec![weights];
        inputs.extend(terms.iter().map(|(_, v)| *v));
        Ok(self.push(t, Op::WeightedSum { weights, offset, terms: terms.to_vec() }, &inputs))
    }

    /// Mean cross-entropy of `logits: [batch, classes]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_live()?;
        let s = self.value(logits).shape();
        let (b, k) = match *s {
            [b, k] if b == labels.len() => (b, k),
            _ => return Err(DassError::shape("cross_entropy", s, &[labels.len()])),
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(DassError::Invalid(format!("cross_entropy label {bad} >= {k} classes")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0f32; b * k];
        let mut loss = 0.0f32;
        for r in 0..b {
            let row = &ld[r * k..(r + 1) * k];
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
            let mut z = 0.0f32;
            for (j, v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[r * k + j] = e;
                z += e;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p /= z;
            }
            loss += z.ln() + m - row[labels[r]];
        }
        let t = Tensor::scalar(loss / b as f32);
        Ok(self.push(t, Op::CrossEntropy { logits, labels: labels.to_vec(), probs, k }, &[logits]))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let t = Tensor::scalar(self.value(x).data().iter().sum());
        Ok(self.push(t, Op::SumAll(x), &[x]))
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        self.check_live()?;
        if !self.value(loss).is_scalar() {
            return Err(DassError::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.filter(|_| n.requires_grad).map(|p| (Var(i), p)))
            .collect();
        let grads = grads
            .into_iter()
            .zip(nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Grads { grads, params })
    }
}

fn acc(grads: &mut [Option<Vec<f32>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f32])) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
    f(buf);
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                acc(grads, nodes, v, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(grads, nodes, *a, |d| {
                for ((x, gy), o) in d.iter_mut().zip(g).zip(bv) {
                    *x += gy * o;
                }
            });
            acc(grads, nodes, *b, |d| {
                for ((x, gy), o) in d.iter_mut().zip(g).zip(av) {
                    *x += gy * o;
                }
            });
        }
        Op::Scale(a, f) => {
            acc(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += f * y));
        }
        Op::AddScalar(a) => {
            acc(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::AddN(terms) => {
            for &t in terms {
                acc(grads, nodes, t, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
        }
        Op::Relu(a) => {
            let out = nodes[i].value.data();
            acc(grads, nodes, *a, |d| {
                for ((x, gy), o) in d.iter_mut().zip(g).zip(out) {
                    if *o > 0.0 {
                        *x += gy;
                    }
                }
            });
        }
        Op::Conv2d { x, w, dims, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            acc(grads, nodes, *x, |d| kernels::conv2d_backward_input(g, wv, dims, geom, d));
            acc(grads, nodes, *w, |d| kernels::conv2d_backward_weight(g, xv, dims, geom, d));
        }
        Op::Linear { x, w, b, batch, fan_in, fan_out } => {
            let (batch, fan_in, fan_out) = (*batch, *fan_in, *fan_out);
            let (xv, wv) = (val(*x), val(*w));
            acc(grads, nodes, *x, |d| {
                for r in 0..batch {
                    let dr = &mut d[r * fan_in..(r + 1) * fan_in];
                    for o in 0..fan_out {
                        let gy = g[r * fan_out + o];
                        for (dx, wo) in dr.iter_mut().zip(&wv[o * fan_in..(o + 1) * fan_in]) {
                            *dx += gy * wo;
                        }
                    }
                }
            });
            acc(grads, nodes, *w, |d| {
                for r in 0..batch {
                    let xr = &xv[r * fan_in..(r + 1) * fan_in];
                    for o in 0..fan_out {
                        let gy = g[r * fan_out + o];
                        for (dw, xi) in d[o * fan_in..(o + 1) * fan_in].iter_mut().zip(xr) {
                            *dw += gy * xi;
                        }
                    }
                }
            });
            if let Some(b) = b {
                acc(grads, nodes, *b, |d| {
                    for r in 0..batch {
                        for o in 0..fan_out {
                            d[o] += g[r * fan_out + o];
                        }
                    }
                });
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, invstd, batch_stats, n, c, hw } => {
            let (n, c, hw) = (*n, *c, *hw);
            let gam = gamma.map(&val);
            // per-channel sums of dy and dy * xhat
            let mut sum_dy = vec![0.0f32; c];
            let mut sum_dy_xhat = vec![0.0f32; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for j in 0..hw {
                        sum_dy[ci] += g[base + j];
                        sum_dy_xhat[ci] += g[base + j] * xhat[base + j];
                    }
                }
            }
            if let Some(gm) = gamma {
                acc(grads, nodes, *gm, |d| d.iter_mut().zip(&sum_dy_xhat).for_each(|(a, b)| *a += b));
            }
            if let Some(bt) = beta {
                acc(grads, nodes, *bt, |d| d.iter_mut().zip(&sum_dy).for_each(|(a, b)| *a += b));
            }
            let m = (n * hw) as f32;
            acc(grads, nodes, *x, |d| {
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = gam.map_or(1.0, |gm| gm[ci]);
                        let base = (ni * c + ci) * hw;
                        if *batch_stats {
                            let k = gv * invstd[ci] / m;
                            for j in 0..hw {
                                d[base + j] +=
                                    k * (m * g[base + j] - sum_dy[ci] - xhat[base + j] * sum_dy_xhat[ci]);
                            }
                        } else {
                            let k = gv * invstd[ci];
                            for j in 0..hw {
                                d[base + j] += k * g[base + j];
                            }
                        }
                    }
                }
            });
        }
        Op::MaxPool { x, argmax } => {
            acc(grads, nodes, *x, |d| {
                for (gy, &src) in g.iter().zip(argmax) {
                    d[src] += gy;
                }
            });
        }
        Op::AvgPool { x, dims, geom } => {
            acc(grads, nodes, *x, |d| kernels::avg_pool_backward(g, dims, geom, d));
        }
        Op::GlobalAvgPool { x, hw } => {
            let hw = *hw;
            acc(grads, nodes, *x, |d| {
                for (p, gy) in g.iter().enumerate() {
                    let share = gy / hw as f32;
                    for v in &mut d[p * hw..(p + 1) * hw] {
                        *v += share;
                    }
                }
            });
        }
        Op::Concat { inputs, channels, n, hw } => {
            let total: usize = channels.iter().sum();
            let mut start = 0;
            for (&v, &c) in inputs.iter().zip(channels) {
                acc(grads, nodes, v, |d| {
                    for ni in 0..*n {
                        let src = &g[(ni * total + start) * hw..(ni * total + start + c) * hw];
                        for (a, b) in d[ni * c * hw..(ni + 1) * c * hw].iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                });
                start += c;
            }
        }
        Op::Crop { x, planes, w, top, left, oh, ow } => {
            let h = oh + top;
            acc(grads, nodes, *x, |d| {
                for p in 0..*planes {
                    for r in 0..*oh {
                        let dst = p * h * w + (r + top) * w + left;
                        let src = (p * oh + r) * ow;
                        for (a, b) in d[dst..dst + ow].iter_mut().zip(&g[src..src + ow]) {
                            *a += b;
                        }
                    }
                }
            });
        }
        Op::Softmax { x, cols } => {
            let y = nodes[i].value.data();
            acc(grads, nodes, *x, |d| {
                for ((dr, yr), gr) in d.chunks_mut(*cols).zip(y.chunks(*cols)).zip(g.chunks(*cols)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv += yv * (gv - dot);
                    }
                }
            });
        }
        Op::WeightedSum { weights, offset, terms } => {
            let wv = val(*weights);
            acc(grads, nodes, *weights, |d| {
                for &(k, t) in terms {
                    let dot: f32 = g.iter().zip(val(t)).map(|(a, b)| a * b).sum();
                    d[offset + k] += dot;
                }
            });
            for &(k, t) in terms {
                let wk = wv[offset + k];
                acc(grads, nodes, t, |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += wk * b));
            }
        }
        Op::CrossEntropy { logits, labels, probs, k } => {
            let b = labels.len();
            let scale = g[0] / b as f32;
            acc(grads, nodes, *logits, |d| {
                for r in 0..b {
                    for j in 0..*k {
                        let target = if labels[r] == j { 1.0 } else { 0.0 };
                        d[r * k + j] += scale * (probs[r * k + j] - target);
                    }
                }
            });
        }
        Op::SumAll(x) => {
            let gy = g[0];
            acc(grads, nodes, *x, |d| d.iter_mut().for_each(|v| *v += gy));
        }
    }
}
