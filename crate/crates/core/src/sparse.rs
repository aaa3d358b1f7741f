//! Parametric sparse layers: weights paired with pruning scores and a binary mask.
//!
//! The effective weight depends on the forward mode:
//!
//! | mode          | effective weight |
//! |---------------|------------------|
//! | `Dense`       | `theta`          |
//! | `ScoreScaled` | `theta * scores` |
//! | `Masked`      | `theta * mask`   |
//!
//! Scores are only differentiable in `ScoreScaled` mode. Binarization
//! (top-k by score magnitude) happens outside the tape.

use serde::{Deserialize, Serialize};

use crate::error::{DassError, Result};
use crate::nn::{uniform_init, Ctx};
use crate::rng::RunRng;
use crate::tensor::{ConvGeom, ParamId, ParamKind, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardMode {
    Dense,
    ScoreScaled,
    Masked,
}

/// Normalizes pretrained weights into initial pruning scores:
/// `scores = theta / max(|theta|)`.
pub fn init_scores(theta_pre: &Tensor) -> Result<Tensor> {
    let max = theta_pre.max_abs();
    if max == 0.0 || !max.is_finite() {
        return Err(DassError::Invalid(format!(
            "cannot normalize scores: max |theta| is {max}"
        )));
    }
    let data = theta_pre.data().iter().map(|v| v / max).collect();
    Tensor::new(theta_pre.shape().to_vec(), data)
}

/// Binary mask with ones at the `k` largest `|scores|`; ties go to the lowest flat index.
pub fn binarize_topk(scores: &Tensor, k: usize) -> Result<Tensor> {
    let n = scores.numel();
    if k > n {
        return Err(DassError::Invalid(format!("top-k with k={k} > numel={n}")));
    }
    let s = scores.data();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s[b].abs().total_cmp(&s[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![0.0f32; n];
    for &i in &order[..k] {
        mask[i] = 1.0;
    }
    Tensor::new(scores.shape().to_vec(), mask)
}

/// Retained-weight count for a layer under a uniform pruning ratio.
pub fn layer_k_from_ratio(numel: usize, pruning_ratio: f64) -> usize {
    let k = (numel as f64 * (1.0 - pruning_ratio)).round();
    k.clamp(0.0, numel as f64) as usize
}

/// Weight, score and mask tensors of one sparse layer, plus its retained count `k`.
#[derive(Clone, Debug)]
pub struct SparseParam {
    pub name: String,
    pub theta: ParamId,
    pub scores: ParamId,
    pub mask: ParamId,
    pub k: usize,
}

impl SparseParam {
    /// Registers `theta` with zero scores and an all-ones mask.
    pub fn new(store: &mut ParamStore, name: &str, theta: Tensor) -> Result<Self> {
        let shape = theta.shape().to_vec();
        let k = theta.numel();
        let theta = store.add(format!("{name}.theta"), ParamKind::Weight, theta)?;
        let scores = store.add(format!("{name}.scores"), ParamKind::Score, Tensor::zeros(&shape))?;
        let mask = store.add(format!("{name}.mask"), ParamKind::Mask, Tensor::ones(&shape))?;
        Ok(Self {
            name: name.to_string(),
            theta,
            scores,
            mask,
            k,
        })
    }

    pub fn numel(&self, store: &ParamStore) -> usize {
        store.value(self.theta).numel()
    }

    pub fn popcount(&self, store: &ParamStore) -> usize {
        store.value(self.mask).count_nonzero()
    }

    pub fn set_ratio(&mut self, store: &ParamStore, ratio: f64) {
        self.k = layer_k_from_ratio(self.numel(store), ratio);
    }

    /// Scores from the current weights.
    pub fn init_scores(&self, store: &mut ParamStore) -> Result<()> {
        let s = init_scores(store.value(self.theta))?;
        *store.value_mut(self.scores) = s;
        Ok(())
    }

    /// Recomputes the mask from the current scores.
    pub fn rebinarize(&self, store: &mut ParamStore) -> Result<()> {
        let m = binarize_topk(store.value(self.scores), self.k)?;
        *store.value_mut(self.mask) = m;
        Ok(())
    }

    pub fn reset_mask(&mut self, store: &mut ParamStore) {
        let shape = store.value(self.mask).shape().to_vec();
        *store.value_mut(self.mask) = Tensor::ones(&shape);
        self.k = self.numel(store);
    }

    /// `theta * mask`, outside the tape.
    pub fn masked_weight(&self, store: &ParamStore) -> Tensor {
        let t = store.value(self.theta);
        let data = t
            .data()
            .iter()
            .zip(store.value(self.mask).data())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    pub fn effective_weight(&self, ctx: &mut Ctx, store: &ParamStore) -> Result<Var> {
        let theta = ctx.param(store, self.theta)?;
        match ctx.mode {
            ForwardMode::Dense => Ok(theta),
            ForwardMode::ScoreScaled => {
                let s = ctx.param(store, self.scores)?;
                ctx.tape.mul(theta, s)
            }
            ForwardMode::Masked => {
                let m = ctx.param(store, self.mask)?;
                ctx.tape.mul(theta, m)
            }
        }
    }
}

/// Which dense primitive a sparse layer wraps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SparseLayerKind {
    Conv(ConvGeom),
    Linear,
}

/// Applies the wrapped primitive with the mode's effective weight.
pub fn sparse_forward(
    ctx: &mut Ctx,
    store: &ParamStore,
    x: Var,
    p: &SparseParam,
    kind: SparseLayerKind,
    bias: Option<ParamId>,
) -> Result<Var> {
    let w = p.effective_weight(ctx, store)?;
    match kind {
        SparseLayerKind::Conv(geom) => ctx.tape.conv2d(x, w, geom),
        SparseLayerKind::Linear => {
            let b = bias.map(|b| ctx.param(store, b)).transpose()?;
            ctx.tape.linear(x, w, b)
        }
    }
}

/// A sparse convolution without bias.
#[derive(Clone, Debug)]
pub struct SparseConv {
    pub weight: SparseParam,
    pub geom: ConvGeom,
}

impl SparseConv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RunRng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geom: ConvGeom,
    ) -> Result<Self> {
        let shape = [c_out, c_in / geom.groups, kernel, kernel];
        let fan_in = shape[1] * kernel * kernel;
        let weight = SparseParam::new(store, name, uniform_init(rng, &shape, fan_in))?;
        Ok(Self { weight, geom })
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &ParamStore, x: Var) -> Result<Var> {
        sparse_forward(ctx, store, x, &self.weight, SparseLayerKind::Conv(self.geom), None)
    }
}

/// A sparse fully connected layer with an unmasked bias.
#[derive(Clone, Debug)]
pub struct SparseLinear {
    pub weight: SparseParam,
    pub bias: ParamId,
}

impl SparseLinear {
    pub fn new(store: &mut ParamStore, rng: &mut RunRng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = SparseParam::new(store, name, uniform_init(rng, &[fan_out, fan_in], fan_in))?;
        let bias = store.add(format!("{name}.bias"), ParamKind::Affine, uniform_init(rng, &[fan_out], fan_in))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &ParamStore, x: Var) -> Result<Var> {
        sparse_forward(ctx, store, x, &self.weight, SparseLayerKind::Linear, Some(self.bias))
    }
}
