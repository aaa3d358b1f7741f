use super::Genotype;
use crate::error::{DassError, Result};
use crate::nn::Ctx;
use crate::rng::RunRng;
use crate::space::{cell_prefix, edge_prefix, CellInput, CellPlan, NetConfig, NetOutput, Network, OpInstance, OpKind, ReluConvBn, Stem};
use crate::sparse::{SparseLinear, SparseParam};
use crate::tensor::{KindSet, ParamKind, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct DerivedEdge {
    pub op: OpKind,
    pub source: usize,
    pub inst: OpInstance,
}

#[derive(Clone, Debug)]
struct DerivedCell {
    plan: CellPlan,
    pre0: CellInput,
    pre1: ReluConvBn,
    /// Two edges per intermediate node, node by node.
    edges: Vec<DerivedEdge>,
}

/// A discrete network built from a genotype. Parameter names match the
/// supernet so trained weights, scores and masks can be carried over.
#[derive(Clone, Debug)]
pub struct DerivedNet {
    pub store: ParamStore,
    pub config: NetConfig,
    pub genotype: Genotype,
    pub stem: Stem,
    cells: Vec<DerivedCell>,
    pub classifier: SparseLinear,
}

impl DerivedNet {
    pub fn build(genotype: &Genotype, config: &NetConfig, rng: &mut RunRng) -> Result<Self> {
        config.validate()?;
        genotype.validate()?;
        if genotype.n_intermediate() != config.n_intermediate() {
            return Err(DassError::Genotype(format!(
                "genotype has {} intermediate nodes, network config expects {}",
                genotype.n_intermediate(),
                config.n_intermediate()
            )));
        }
        let mut store = ParamStore::new();
        let stem = Stem::build(&mut store, rng, config)?;
        let opts = config.op_options();
        let mut cells = Vec::with_capacity(config.n_cells);
        for (ci, plan) in config.plan().into_iter().enumerate() {
            let prefix = cell_prefix(ci);
            let pre0 = CellInput::build(&mut store, rng, &format!("{prefix}.pre0"), &plan)?;
            let pre1 = ReluConvBn::new(&mut store, rng, &format!("{prefix}.pre1"), plan.c_prev, plan.channels)?;
            let pairs = if plan.reduction { &genotype.reduce } else { &genotype.normal };
            let mut edges = Vec::with_capacity(pairs.len());
            for (p, &(op, source)) in pairs.iter().enumerate() {
                let node = p / 2 + 2;
                let stride = if plan.reduction && source < 2 { 2 } else { 1 };
                let inst = OpInstance::build(op, &mut store, rng, &edge_prefix(ci, node, source), plan.channels, stride, opts)?;
                edges.push(DerivedEdge { op, source, inst });
            }
            cells.push(DerivedCell { plan, pre0, pre1, edges });
        }
        let classifier = SparseLinear::new(&mut store, rng, "classifier", config.final_channels(), config.num_classes)?;
        Ok(Self {
            store,
            config: config.clone(),
            genotype: genotype.clone(),
            stem,
            cells,
            classifier,
        })
    }

    /// Copies every same-named tensor of `kinds` from `source`. All tensors of
    /// those kinds must be found. Each layer's retained count is then reset to
    /// its mask popcount.
    pub fn inherit(&mut self, source: &ParamStore, kinds: KindSet) -> Result<()> {
        let wanted = self.store.ids_of(kinds).len();
        let copied = self.store.copy_matching_from(source, kinds);
        if copied != wanted {
            return Err(DassError::Genotype(format!(
                "only {copied} of {wanted} tensors could be inherited; genotype and source network disagree"
            )));
        }
        let store = &self.store;
        let counts: Vec<usize> = self.sparse_params().iter().map(|p| p.popcount(store)).collect();
        for (p, k) in self.sparse_params_mut().into_iter().zip(counts) {
            p.k = k;
        }
        Ok(())
    }

    pub fn edges(&self, cell: usize) -> &[DerivedEdge] {
        &self.cells[cell].edges
    }

    pub fn cell_plan(&self, cell: usize) -> CellPlan {
        self.cells[cell].plan
    }
}

/// Builds the network for `genotype`. With `inherited`, weights, scores,
/// masks and batch-norm statistics are taken from that store by name.
pub fn instantiate(
    genotype: &Genotype,
    config: &NetConfig,
    inherited: Option<&ParamStore>,
    rng: &mut RunRng,
) -> Result<DerivedNet> {
    let mut net = DerivedNet::build(genotype, config, rng)?;
    if let Some(src) = inherited {
        let kinds = KindSet::of(&[
            ParamKind::Weight,
            ParamKind::Affine,
            ParamKind::Score,
            ParamKind::Mask,
            ParamKind::Buffer,
        ]);
        net.inherit(src, kinds)?;
    }
    Ok(net)
}

impl Network for DerivedNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<NetOutput> {
        let Self { store, stem, cells, classifier, genotype, .. } = self;
        let s = stem.forward(ctx, store, x)?;
        let (mut s0, mut s1) = (s, s);
        let mut cell_outputs = Vec::with_capacity(cells.len());
        for cell in cells.iter() {
            let a = cell.pre0.forward(ctx, store, s0)?;
            let b = cell.pre1.forward(ctx, store, s1)?;
            let mut states = vec![a, b];
            for pair in cell.edges.chunks(2) {
                let mut incoming = Vec::with_capacity(2);
                for e in pair {
                    incoming.push(e.inst.forward(ctx, store, states[e.source])?);
                }
                let h = ctx.tape.add_n(&incoming)?;
                states.push(h);
            }
            let picked: Vec<Var> = genotype.concat_nodes.iter().map(|&n| states[n]).collect();
            let out = ctx.tape.concat(&picked)?;
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
            .flat_map(|e| e.inst.sparse_params())
            .collect();
        out.push(&self.classifier.weight);
        out
    }

    fn sparse_params_mut(&mut self) -> Vec<&mut SparseParam> {
        let mut out: Vec<&mut SparseParam> = self
            .cells
            .iter_mut()
            .flat_map(|c| c.edges.iter_mut())
            .flat_map(|e| e.inst.sparse_params_mut())
            .collect();
        out.push(&mut self.classifier.weight);
        out
    }

    fn n_cells(&self) -> usize {
        self.cells.len()
    }
}
