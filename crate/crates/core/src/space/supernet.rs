use serde::{Deserialize, Serialize};

use super::{mixed_forward, node_forward, FactorizedReduce, MixedEdge, NetOutput, Network, OpOptions, OperationSet, ReluConvBn};
use crate::error::{DassError, Result};
use crate::nn::{BatchNorm, Ctx, DenseConv};
use crate::rng::RunRng;
use crate::sparse::{SparseLinear, SparseParam};
use crate::tensor::{ConvGeom, ParamId, ParamKind, ParamStore, Tensor, Var};

/// Architecture hyperparameters shared by the supernet and derived networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub n_cells: usize,
    /// Nodes per cell: two inputs, the intermediates and one output.
    pub n_nodes: usize,
    pub init_channels: usize,
    pub stem_multiplier: usize,
    pub include_zero_op: bool,
    pub double_sep_conv: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            num_classes: 10,
            n_cells: 8,
            n_nodes: 7,
            init_channels: 16,
            stem_multiplier: 3,
            include_zero_op: false,
            double_sep_conv: true,
        }
    }
}

/// Cell indices that reduce: `floor(n/3)` and `floor(2n/3)`, moved to at
/// least index 1 so a normal cell precedes the first reduction, deduplicated.
pub fn reduction_positions(n_cells: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for p in [n_cells / 3, 2 * n_cells / 3] {
        let p = p.max(1);
        if p < n_cells && !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// Channel bookkeeping of one cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellPlan {
    pub reduction: bool,
    pub reduction_prev: bool,
    /// Channels of the cell two steps back.
    pub c_prev_prev: usize,
    pub c_prev: usize,
    /// Per-node width inside this cell.
    pub channels: usize,
}

impl NetConfig {
    pub fn n_intermediate(&self) -> usize {
        self.n_nodes.saturating_sub(3)
    }

    /// Number of mixed edges per cell.
    pub fn edges_per_cell(&self) -> usize {
        (0..self.n_intermediate()).map(|i| i + 2).sum()
    }

    pub fn op_set(&self) -> OperationSet {
        OperationSet::standard(self.include_zero_op)
    }

    pub fn op_options(&self) -> OpOptions {
        OpOptions {
            double_sep_conv: self.double_sep_conv,
        }
    }

    pub fn stem_channels(&self) -> usize {
        self.stem_multiplier * self.init_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: String| Err(DassError::config(f, r));
        if self.n_cells < 2 {
            return bad("n_cells", format!("need at least 2 cells, got {}", self.n_cells));
        }
        if self.n_nodes < 4 {
            return bad("n_nodes", format!("need at least 4 nodes (one intermediate), got {}", self.n_nodes));
        }
        if self.init_channels < 2 || !self.init_channels.is_multiple_of(2) {
            return bad("init_channels", format!("must be even and >= 2, got {}", self.init_channels));
        }
        if self.in_channels == 0 || self.stem_multiplier == 0 {
            return bad("in_channels", "channels and stem multiplier must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes", format!("need at least 2 classes, got {}", self.num_classes));
        }
        let factor = 1usize << reduction_positions(self.n_cells).len();
        if self.image_size < factor || !self.image_size.is_multiple_of(factor) {
            return bad(
                "image_size",
                format!("{} is not divisible by the reduction factor {factor}", self.image_size),
            );
        }
        Ok(())
    }

    pub fn plan(&self) -> Vec<CellPlan> {
        let reductions = reduction_positions(self.n_cells);
        let mut c_pp = self.stem_channels();
        let mut c_p = c_pp;
        let mut c = self.init_channels;
        let mut reduction_prev = false;
        let mut out = Vec::with_capacity(self.n_cells);
        for i in 0..self.n_cells {
            let reduction = reductions.contains(&i);
            if reduction {
                c *= 2;
            }
            out.push(CellPlan {
                reduction,
                reduction_prev,
                c_prev_prev: c_pp,
                c_prev: c_p,
                channels: c,
            });
            c_pp = c_p;
            c_p = self.n_intermediate() * c;
            reduction_prev = reduction;
        }
        out
    }

    /// Masked weights of the supernet: every candidate on every edge, plus the classifier.
    pub fn supernet_sparse_numel(&self) -> usize {
        let ops = self.op_set().ops;
        let cells: usize = self
            .plan()
            .iter()
            .map(|p| self.edges_per_cell() * ops.iter().map(|k| k.sparse_numel(p.channels, self.op_options())).sum::<usize>())
            .sum();
        cells + self.final_channels() * self.num_classes
    }

    /// Channels entering the classifier.
    pub fn final_channels(&self) -> usize {
        self.plan().last().map_or(0, |p| p.channels * self.n_intermediate())
    }
}

/// Adapter for the cell input two steps back.
#[derive(Clone, Debug)]
pub enum CellInput {
    Conv(ReluConvBn),
    Reduce(FactorizedReduce),
}

impl CellInput {
    pub fn build(store: &mut ParamStore, rng: &mut RunRng, prefix: &str, plan: &CellPlan) -> Result<Self> {
        Ok(if plan.reduction_prev {
            CellInput::Reduce(FactorizedReduce::new(store, rng, prefix, plan.c_prev_prev, plan.channels)?)
        } else {
            CellInput::Conv(ReluConvBn::new(store, rng, prefix, plan.c_prev_prev, plan.channels)?)
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &mut ParamStore, x: Var) -> Result<Var> {
        match self {
            CellInput::Conv(c) => c.forward(ctx, store, x),
            CellInput::Reduce(r) => r.forward(ctx, store, x),
        }
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        match self {
            CellInput::Conv(c) => c.param_count(store),
            CellInput::Reduce(r) => r.param_count(store),
        }
    }
}

/// Stem convolution and batch norm.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: DenseConv,
    pub bn: BatchNorm,
}

impl Stem {
    pub fn build(store: &mut ParamStore, rng: &mut RunRng, cfg: &NetConfig) -> Result<Self> {
        let c = cfg.stem_channels();
        let conv = DenseConv::new(store, rng, "stem.conv", cfg.in_channels, c, 3, ConvGeom::new(1, 1, 1, 1))?;
        let bn = BatchNorm::new(store, "stem.bn", c, true)?;
        Ok(Self { conv, bn })
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &mut ParamStore, x: Var) -> Result<Var> {
        let h = self.conv.forward(ctx, store, x)?;
        self.bn.forward(ctx, store, h)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.conv.param_count(store) + self.bn.param_count()
    }
}

#[derive(Clone, Debug)]
pub struct SearchCell {
    pub plan: CellPlan,
    pub pre0: CellInput,
    pub pre1: ReluConvBn,
    pub edges: Vec<MixedEdge>,
}

/// The supernet: stem, stacked search cells, global pooling and a sparse classifier.
/// Normal cells share one architecture table, reduction cells the other.
#[derive(Clone, Debug)]
pub struct Supernet {
    pub store: ParamStore,
    pub config: NetConfig,
    pub op_set: OperationSet,
    pub stem: Stem,
    pub cells: Vec<SearchCell>,
    pub classifier: SparseLinear,
    pub alpha_normal: ParamId,
    pub alpha_reduce: ParamId,
}

pub(crate) fn cell_prefix(i: usize) -> String {
    format!("cells.{i}")
}

pub(crate) fn edge_prefix(cell: usize, node: usize, source: usize) -> String {
    format!("cells.{cell}.edge_{node}_{source}")
}

impl Supernet {
    pub fn new(config: &NetConfig, rng: &mut RunRng) -> Result<Self> {
        Self::with_op_set(config, config.op_set(), rng)
    }

    pub fn with_op_set(config: &NetConfig, op_set: OperationSet, rng: &mut RunRng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let stem = Stem::build(&mut store, rng, config)?;
        let opts = config.op_options();
        let mut cells = Vec::with_capacity(config.n_cells);
        for (ci, plan) in config.plan().into_iter().enumerate() {
            let prefix = cell_prefix(ci);
            let pre0 = CellInput::build(&mut store, rng, &format!("{prefix}.pre0"), &plan)?;
            let pre1 = ReluConvBn::new(&mut store, rng, &format!("{prefix}.pre1"), plan.c_prev, plan.channels)?;
            let mut edges = Vec::with_capacity(config.edges_per_cell());
            for i in 0..config.n_intermediate() {
                let node = i + 2;
                for src in 0..node {
                    let stride = if plan.reduction && src < 2 { 2 } else { 1 };
                    edges.push(MixedEdge::build(
                        &mut store,
                        rng,
                        &edge_prefix(ci, node, src),
                        &op_set,
                        src,
                        plan.channels,
                        stride,
                        opts,
                    )?);
                }
            }
            cells.push(SearchCell { plan, pre0, pre1, edges });
        }
        let classifier = SparseLinear::new(&mut store, rng, "classifier", config.final_channels(), config.num_classes)?;
        let shape = [config.edges_per_cell(), op_set.len()];
        let mut alpha = |store: &mut ParamStore, name: &str| -> Result<ParamId> {
            let n = shape[0] * shape[1];
            let data = (0..n).map(|_| rng.normal(0.0, 1e-3)).collect();
            store.add(name, ParamKind::Alpha, Tensor::new(shape.to_vec(), data)?)
        };
        let alpha_normal = alpha(&mut store, "alpha.normal")?;
        let alpha_reduce = alpha(&mut store, "alpha.reduce")?;
        Ok(Self {
            store,
            config: config.clone(),
            op_set,
            stem,
            cells,
            classifier,
            alpha_normal,
            alpha_reduce,
        })
    }

    pub fn alpha_ids(&self) -> [ParamId; 2] {
        [self.alpha_normal, self.alpha_reduce]
    }

    pub fn alpha_normal(&self) -> &Tensor {
        self.store.value(self.alpha_normal)
    }

    pub fn alpha_reduce(&self) -> &Tensor {
        self.store.value(self.alpha_reduce)
    }

    /// Re-draws both architecture tables as `N(0, 1e-3)` noise.
    pub fn reset_alpha(&mut self, rng: &mut RunRng) {
        for id in self.alpha_ids() {
            for v in self.store.value_mut(id).data_mut() {
                *v = rng.normal(0.0, 1e-3);
            }
        }
    }

    /// Runs one search cell on its two inputs.
    pub fn cell_forward(
        ctx: &mut Ctx,
        store: &mut ParamStore,
        cell: &SearchCell,
        x_prev2: Var,
        x_prev1: Var,
        weights: Var,
        n_ops: usize,
    ) -> Result<Var> {
        let s0 = cell.pre0.forward(ctx, store, x_prev2)?;
        let s1 = cell.pre1.forward(ctx, store, x_prev1)?;
        let mut states = vec![s0, s1];
        let mut e = 0;
        while states.len() < 2 + n_intermediate_from_edges(cell.edges.len()) {
            let node = states.len();
            let mut incoming = Vec::with_capacity(node);
            for _ in 0..node {
                let edge = &cell.edges[e];
                incoming.push(mixed_forward(ctx, store, states[edge.source], edge, weights, e * n_ops)?);
                e += 1;
            }
            let h = node_forward(ctx, &incoming)?;
            states.push(h);
        }
        ctx.tape.concat(&states[2..])
    }
}

fn n_intermediate_from_edges(edges: usize) -> usize {
    let mut n = 0;
    let mut total = 0;
    while total < edges {
        total += n + 2;
        n += 1;
    }
    n
}

impl Network for Supernet {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<NetOutput> {
        let Self { store, stem, cells, classifier, alpha_normal, alpha_reduce, op_set, .. } = self;
        let n_ops = op_set.len();
        let an = ctx.param(store, *alpha_normal)?;
        let w_normal = ctx.tape.softmax(an)?;
        let ar = ctx.param(store, *alpha_reduce)?;
        let w_reduce = ctx.tape.softmax(ar)?;
        let s = stem.forward(ctx, store, x)?;
        let (mut s0, mut s1) = (s, s);
        let mut cell_outputs = Vec::with_capacity(cells.len());
        for cell in cells.iter() {
            let w = if cell.plan.reduction { w_reduce } else { w_normal };
            let out = Supernet::cell_forward(ctx, store, cell, s0, s1, w, n_ops)?;
            cell_outputs.push(out);
            s0 = s1;
            s1 = out;
        }
        let pooled = ctx.tape.global_avg_pool(s1)?;
        let logits = classifier.forward(ctx, store, pooled)?;
        Ok(NetOutput { logits, cell_outputs })
    }

    fn sparse_params(&self) -> Vec<&SparseParam> {
        let mut out: Vec<&SparseParam> = self
            .cells
            .iter()
            .flat_map(|c| c.edges.iter())
            .flat_map(|e| e.ops.iter())
            .flat_map(|(_, op)| op.sparse_params())
            .collect();
        out.push(&self.classifier.weight);
        out
    }

    fn sparse_params_mut(&mut self) -> Vec<&mut SparseParam> {
        let mut out: Vec<&mut SparseParam> = self
            .cells
            .iter_mut()
            .flat_map(|c| c.edges.iter_mut())
            .flat_map(|e| e.ops.iter_mut())
            .flat_map(|(_, op)| op.sparse_params_mut())
            .collect();
        out.push(&mut self.classifier.weight);
        out
    }

    fn n_cells(&self) -> usize {
        self.cells.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_placement() {
        assert_eq!(reduction_positions(8), vec![2, 5]);
        assert_eq!(reduction_positions(2), vec![1]);
        assert_eq!(reduction_positions(3), vec![1, 2]);
        assert_eq!(reduction_positions(20), vec![6, 13]);
    }

    #[test]
    fn channels_double_at_each_reduction() {
        let cfg = NetConfig::default();
        let plan = cfg.plan();
        assert_eq!(plan.last().unwrap().channels, 64);
        assert!(plan[2].reduction && plan[5].reduction);
        assert!(plan[3].reduction_prev);
    }

    #[test]
    fn edge_counts() {
        let cfg = NetConfig::default();
        assert_eq!(cfg.n_intermediate(), 4);
        assert_eq!(cfg.edges_per_cell(), 14);
        assert_eq!(n_intermediate_from_edges(14), 4);
        assert_eq!(n_intermediate_from_edges(5), 2);
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = NetConfig { n_cells: 1, ..NetConfig::default() };
        assert!(cfg.validate().unwrap_err().to_string().contains("n_cells"));
        let cfg = NetConfig { image_size: 6, ..NetConfig::default() };
        assert!(cfg.validate().unwrap_err().to_string().contains("image_size"));
    }
}
