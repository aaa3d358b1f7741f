use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DassError, Result};
use crate::nn::{BatchNorm, Ctx, DenseConv};
use crate::rng::RunRng;
use crate::sparse::{SparseConv, SparseParam};
use crate::tensor::{kernels, ConvGeom, ParamStore, PoolGeom, Tensor, Var};

/// A candidate operation on a cell edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "sep_sparse_conv_3x3")]
    SepConv3,
    #[serde(rename = "sep_sparse_conv_5x5")]
    SepConv5,
    #[serde(rename = "dil_sparse_conv_3x3")]
    DilConv3,
    #[serde(rename = "dil_sparse_conv_5x5")]
    DilConv5,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3,
    #[serde(rename = "skip_connect")]
    Skip,
    #[serde(rename = "none")]
    Zero,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::SepConv3,
        OpKind::SepConv5,
        OpKind::DilConv3,
        OpKind::DilConv5,
        OpKind::MaxPool3,
        OpKind::AvgPool3,
        OpKind::Skip,
        OpKind::Zero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3 => "sep_sparse_conv_3x3",
            OpKind::SepConv5 => "sep_sparse_conv_5x5",
            OpKind::DilConv3 => "dil_sparse_conv_3x3",
            OpKind::DilConv5 => "dil_sparse_conv_5x5",
            OpKind::MaxPool3 => "max_pool_3x3",
            OpKind::AvgPool3 => "avg_pool_3x3",
            OpKind::Skip => "skip_connect",
            OpKind::Zero => "none",
        }
    }

    pub fn has_weights(self) -> bool {
        matches!(self, OpKind::SepConv3 | OpKind::SepConv5 | OpKind::DilConv3 | OpKind::DilConv5)
    }

    /// Masked weights of this op at a given width: a depthwise `k x k` and a
    /// pointwise kernel per separable stage.
    pub fn sparse_numel(self, channels: usize, opts: OpOptions) -> usize {
        let stage = |k: usize| k * k * channels + channels * channels;
        let stages = if opts.double_sep_conv { 2 } else { 1 };
        match self {
            OpKind::SepConv3 => stages * stage(3),
            OpKind::SepConv5 => stages * stage(5),
            OpKind::DilConv3 => stage(3),
            OpKind::DilConv5 => stage(5),
            _ => 0,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = DassError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DassError::Genotype(format!("unknown operation {s:?}")))
    }
}

/// Ordered candidate operations; architecture-parameter column `i` weights `ops[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OperationSet {
    pub ops: Vec<OpKind>,
}

impl OperationSet {
    /// The seven sparse-search operations, optionally followed by the zero op.
    pub fn standard(include_zero: bool) -> Self {
        let mut ops = vec![
            OpKind::SepConv3,
            OpKind::SepConv5,
            OpKind::DilConv3,
            OpKind::DilConv5,
            OpKind::MaxPool3,
            OpKind::AvgPool3,
            OpKind::Skip,
        ];
        if include_zero {
            ops.push(OpKind::Zero);
        }
        Self { ops }
    }

    pub fn custom(ops: Vec<OpKind>) -> Result<Self> {
        if ops.is_empty() {
            return Err(DassError::config("op_set", "empty operation set"));
        }
        for (i, a) in ops.iter().enumerate() {
            if ops[..i].contains(a) {
                return Err(DassError::config("op_set", format!("duplicate operation {a}")));
            }
        }
        Ok(Self { ops })
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn index_of(&self, kind: OpKind) -> Option<usize> {
        self.ops.iter().position(|k| *k == kind)
    }
}

/// A ReLU followed by depthwise then pointwise sparse convolution and batch norm.
#[derive(Clone, Debug)]
pub struct SepStage {
    pub depthwise: SparseConv,
    pub pointwise: SparseConv,
    pub bn: BatchNorm,
}

impl SepStage {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut RunRng,
        prefix: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        let pad = dilation * (kernel - 1) / 2;
        let depthwise = SparseConv::new(
            store,
            rng,
            &format!("{prefix}.dw"),
            channels,
            channels,
            kernel,
            ConvGeom::new(stride, pad, dilation, channels),
        )?;
        let pointwise = SparseConv::new(store, rng, &format!("{prefix}.pw"), channels, channels, 1, ConvGeom::valid())?;
        let bn = BatchNorm::new(store, &format!("{prefix}.bn"), channels, false)?;
        Ok(Self { depthwise, pointwise, bn })
    }

    fn forward(&self, ctx: &mut Ctx, store: &mut ParamStore, x: Var) -> Result<Var> {
        let h = ctx.tape.relu(x)?;
        let h = self.depthwise.forward(ctx, store, h)?;
        let h = self.pointwise.forward(ctx, store, h)?;
        self.bn.forward(ctx, store, h)
    }
}

/// Halves spatial size with two offset stride-2 1x1 convolutions (dense).
#[derive(Clone, Debug)]
pub struct FactorizedReduce {
    pub conv_a: DenseConv,
    pub conv_b: DenseConv,
    pub bn: BatchNorm,
}

impl FactorizedReduce {
    pub fn new(store: &mut ParamStore, rng: &mut RunRng, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        if !c_out.is_multiple_of(2) {
            return Err(DassError::config("init_channels", format!("factorized reduce needs even channels, got {c_out}")));
        }
        let g = ConvGeom::new(2, 0, 1, 1);
        let conv_a = DenseConv::new(store, rng, &format!("{prefix}.conv_a"), c_in, c_out / 2, 1, g)?;
        let conv_b = DenseConv::new(store, rng, &format!("{prefix}.conv_b"), c_in, c_out / 2, 1, g)?;
        let bn = BatchNorm::new(store, &format!("{prefix}.bn"), c_out, false)?;
        Ok(Self { conv_a, conv_b, bn })
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &mut ParamStore, x: Var) -> Result<Var> {
        let h = ctx.tape.relu(x)?;
        let a = self.conv_a.forward(ctx, store, h)?;
        let shifted = ctx.tape.crop(h, 1, 1)?;
        let b = self.conv_b.forward(ctx, store, shifted)?;
        let cat = ctx.tape.concat(&[a, b])?;
        self.bn.forward(ctx, store, cat)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.conv_a.param_count(store) + self.conv_b.param_count(store) + self.bn.param_count()
    }
}

/// A ReLU, dense 1x1 convolution and batch norm; adapts cell inputs to the cell width.
#[derive(Clone, Debug)]
pub struct ReluConvBn {
    pub conv: DenseConv,
    pub bn: BatchNorm,
}

impl ReluConvBn {
    pub fn new(store: &mut ParamStore, rng: &mut RunRng, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let conv = DenseConv::new(store, rng, &format!("{prefix}.conv"), c_in, c_out, 1, ConvGeom::valid())?;
        let bn = BatchNorm::new(store, &format!("{prefix}.bn"), c_out, false)?;
        Ok(Self { conv, bn })
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &mut ParamStore, x: Var) -> Result<Var> {
        let h = ctx.tape.relu(x)?;
        let h = self.conv.forward(ctx, store, h)?;
        self.bn.forward(ctx, store, h)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.conv.param_count(store) + self.bn.param_count()
    }
}

/// An instantiated candidate operation.
#[derive(Clone, Debug)]
pub enum OpInstance {
    /// One or two separable stages; only the first is strided.
    SepConv(Vec<SepStage>),
    /// A single dilated (dilation 2) separable stage.
    DilConv(SepStage),
    MaxPool { stride: usize },
    AvgPool { stride: usize },
    Identity,
    Reduce(FactorizedReduce),
    Zero { stride: usize },
}

/// Construction options shared by every edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpOptions {
    pub double_sep_conv: bool,
}

impl OpInstance {
    pub fn build(
        kind: OpKind,
        store: &mut ParamStore,
        rng: &mut RunRng,
        prefix: &str,
        channels: usize,
        stride: usize,
        opts: OpOptions,
    ) -> Result<Self> {
        let prefix = format!("{prefix}.{}", kind.name());
        Ok(match kind {
            OpKind::SepConv3 | OpKind::SepConv5 => {
                let k = if kind == OpKind::SepConv3 { 3 } else { 5 };
                let mut stages = vec![SepStage::new(store, rng, &format!("{prefix}.s1"), channels, k, stride, 1)?];
                if opts.double_sep_conv {
                    stages.push(SepStage::new(store, rng, &format!("{prefix}.s2"), channels, k, 1, 1)?);
                }
                OpInstance::SepConv(stages)
            }
            OpKind::DilConv3 | OpKind::DilConv5 => {
                let k = if kind == OpKind::DilConv3 { 3 } else { 5 };
                OpInstance::DilConv(SepStage::new(store, rng, &format!("{prefix}.s1"), channels, k, stride, 2)?)
            }
            OpKind::MaxPool3 => OpInstance::MaxPool { stride },
            OpKind::AvgPool3 => OpInstance::AvgPool { stride },
            OpKind::Skip if stride == 1 => OpInstance::Identity,
            OpKind::Skip => OpInstance::Reduce(FactorizedReduce::new(store, rng, &prefix, channels, channels)?),
            OpKind::Zero => OpInstance::Zero { stride },
        })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, OpInstance::Zero { .. })
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &mut ParamStore, x: Var) -> Result<Var> {
        let pool = |stride| PoolGeom { kernel: 3, stride, pad: 1 };
        match self {
            OpInstance::SepConv(stages) => {
                let mut h = x;
                for s in stages {
                    h = s.forward(ctx, store, h)?;
                }
                Ok(h)
            }
            OpInstance::DilConv(stage) => stage.forward(ctx, store, x),
            OpInstance::MaxPool { stride } => ctx.tape.max_pool(x, pool(*stride)),
            OpInstance::AvgPool { stride } => ctx.tape.avg_pool(x, pool(*stride)),
            OpInstance::Identity => Ok(x),
            OpInstance::Reduce(fr) => fr.forward(ctx, store, x),
            OpInstance::Zero { stride } => {
                let s = ctx.tape.value(x).shape().to_vec();
                let err = || crate::error::DassError::shape("zero", &s, &[*stride]);
                if s.len() != 4 {
                    return Err(err());
                }
                let oh = kernels::out_size(s[2], 3, *stride, 1, 1).ok_or_else(err)?;
                let ow = kernels::out_size(s[3], 3, *stride, 1, 1).ok_or_else(err)?;
                ctx.tape.constant(Tensor::zeros(&[s[0], s[1], oh, ow]))
            }
        }
    }

    pub fn sparse_params(&self) -> Vec<&SparseParam> {
        match self {
            OpInstance::SepConv(stages) => stages
                .iter()
                .flat_map(|s| [&s.depthwise.weight, &s.pointwise.weight])
                .collect(),
            OpInstance::DilConv(s) => vec![&s.depthwise.weight, &s.pointwise.weight],
            _ => Vec::new(),
        }
    }

    pub fn sparse_params_mut(&mut self) -> Vec<&mut SparseParam> {
        match self {
            OpInstance::SepConv(stages) => stages
                .iter_mut()
                .flat_map(|s| [&mut s.depthwise.weight, &mut s.pointwise.weight])
                .collect(),
            OpInstance::DilConv(s) => vec![&mut s.depthwise.weight, &mut s.pointwise.weight],
            _ => Vec::new(),
        }
    }

    /// Weights of dense (never masked) tensors in this op.
    pub fn dense_param_count(&self, store: &ParamStore) -> usize {
        match self {
            OpInstance::Reduce(fr) => fr.param_count(store),
            _ => 0,
        }
    }
}
