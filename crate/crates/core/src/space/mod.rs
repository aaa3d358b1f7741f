//! The continuous cell-based supernet.
//!
//! A cell has two input nodes, `n_nodes - 3` intermediate nodes and one output
//! node. Every intermediate node receives a mixed edge from every earlier node,
//! sums them, and the output concatenates all intermediate nodes channelwise.
//! Edges are stored node by node, sources ascending, which is also the row
//! order of the architecture-parameter tables.

mod ops;
mod supernet;

pub use ops::{FactorizedReduce, OpInstance, OpKind, OpOptions, OperationSet, ReluConvBn, SepStage};
pub use supernet::{reduction_positions, CellInput, CellPlan, NetConfig, SearchCell, Stem, Supernet};
pub(crate) use supernet::{cell_prefix, edge_prefix};

use crate::error::{DassError, Result};
use crate::nn::Ctx;
use crate::rng::RunRng;
use crate::sparse::SparseParam;
use crate::tensor::{ParamStore, Var};

/// Outputs of a network forward pass.
#[derive(Clone, Debug)]
pub struct NetOutput {
    pub logits: Var,
    pub cell_outputs: Vec<Var>,
}

/// Anything the search and evaluation loops can train.
pub trait Network {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<NetOutput>;
    fn sparse_params(&self) -> Vec<&SparseParam>;
    fn sparse_params_mut(&mut self) -> Vec<&mut SparseParam>;
    fn n_cells(&self) -> usize;
}

/// One edge of the supernet: every candidate op applied to the same source node.
#[derive(Clone, Debug)]
pub struct MixedEdge {
    pub source: usize,
    pub ops: Vec<(OpKind, OpInstance)>,
}

impl MixedEdge {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        store: &mut ParamStore,
        rng: &mut RunRng,
        prefix: &str,
        op_set: &OperationSet,
        source: usize,
        channels: usize,
        stride: usize,
        opts: OpOptions,
    ) -> Result<Self> {
        let ops = op_set
            .ops
            .iter()
            .map(|&k| OpInstance::build(k, store, rng, prefix, channels, stride, opts).map(|op| (k, op)))
            .collect::<Result<_>>()?;
        Ok(Self { source, ops })
    }
}

/// `sum_o softmax(alpha)_o * o(x)`, where `weights` holds the softmaxed table and
/// this edge's row starts at `row_offset`. Zero ops contribute nothing but keep
/// their softmax share.
pub fn mixed_forward(
    ctx: &mut Ctx,
    store: &mut ParamStore,
    x: Var,
    edge: &MixedEdge,
    weights: Var,
    row_offset: usize,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(edge.ops.len());
    let mut zero = None;
    for (i, (_, op)) in edge.ops.iter().enumerate() {
        let y = op.forward(ctx, store, x)?;
        if op.is_zero() {
            zero = Some(y);
        } else {
            terms.push((i, y));
        }
    }
    if let Some(first) = terms.first().map(|t| t.1) {
        let s0 = ctx.tape.value(first).shape().to_vec();
        for &(i, t) in &terms[1..] {
            let s = ctx.tape.value(t).shape();
            if s != s0.as_slice() {
                return Err(DassError::Shape {
                    op: "mixed_forward",
                    left: s0,
                    right: [s, &[i]].concat(),
                });
            }
        }
    }
    match (terms.is_empty(), zero) {
        (false, _) => ctx.tape.weighted_sum(weights, row_offset, &terms),
        (true, Some(z)) => Ok(z),
        (true, None) => Err(DassError::Invalid("edge without operations".into())),
    }
}

/// Elementwise sum of the incoming edge outputs of one node.
pub fn node_forward(ctx: &mut Ctx, inputs: &[Var]) -> Result<Var> {
    ctx.tape.add_n(inputs)
}
