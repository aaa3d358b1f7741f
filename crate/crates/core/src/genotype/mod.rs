//! Discrete cell descriptions extracted from architecture parameters.

mod network;

pub use network::{instantiate, DerivedEdge, DerivedNet};

use serde::{Deserialize, Serialize};

use crate::error::{DassError, Result};
use crate::space::{NetConfig, OpKind, OperationSet};
use crate::tensor::Tensor;

/// Two `(op, source node)` pairs per intermediate node, for both cell types.
/// Intermediate node `i` (0-based) is node `i + 2`; its pairs sit at `2i` and `2i + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub normal: Vec<(OpKind, usize)>,
    pub reduce: Vec<(OpKind, usize)>,
    pub concat_nodes: Vec<usize>,
}

/// The op chosen on one edge and its softmax weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeChoice {
    pub source: usize,
    pub op_index: usize,
    pub op: OpKind,
    pub weight: f64,
}

fn softmax_row(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn n_intermediate_for_edges(edges: usize) -> Option<usize> {
    let (mut n, mut total) = (0, 0);
    while total < edges {
        total += n + 2;
        n += 1;
    }
    (total == edges && n > 0).then_some(n)
}

/// Per-edge argmax over the softmax weights, ignoring the zero op.
/// Ties go to the lowest op index.
pub fn edge_choices(alpha: &Tensor, op_set: &OperationSet) -> Result<Vec<EdgeChoice>> {
    let n_ops = op_set.len();
    let edges = match *alpha.shape() {
        [e, o] if o == n_ops => e,
        _ => return Err(DassError::shape("derive", alpha.shape(), &[0, n_ops])),
    };
    let n_inter = n_intermediate_for_edges(edges)
        .ok_or_else(|| DassError::Genotype(format!("{edges} edges do not form a complete cell")))?;
    let mut out = Vec::with_capacity(edges);
    let mut e = 0;
    for i in 0..n_inter {
        for source in 0..i + 2 {
            let w = softmax_row(&alpha.data()[e * n_ops..(e + 1) * n_ops]);
            let mut best: Option<(usize, f64)> = None;
            for (j, &wj) in w.iter().enumerate() {
                if op_set.ops[j] == OpKind::Zero {
                    continue;
                }
                if best.is_none_or(|(_, bw)| wj > bw) {
                    best = Some((j, wj));
                }
            }
            let (op_index, weight) =
                best.ok_or_else(|| DassError::Genotype("operation set has only the zero op".into()))?;
            out.push(EdgeChoice {
                source,
                op_index,
                op: op_set.ops[op_index],
                weight,
            });
            e += 1;
        }
    }
    Ok(out)
}

fn derive_cell(alpha: &Tensor, op_set: &OperationSet) -> Result<Vec<(OpKind, usize)>> {
    let choices = edge_choices(alpha, op_set)?;
    let mut out = Vec::new();
    let mut start = 0;
    let mut node = 2;
    while start < choices.len() {
        let edges = &choices[start..start + node];
        let mut ranked: Vec<&EdgeChoice> = edges.iter().collect();
        // strongest first; ties to the lower source (stable sort keeps source order)
        ranked.sort_by(|a, b| b.weight.total_cmp(&a.weight));
        let mut kept: Vec<&EdgeChoice> = ranked[..2].to_vec();
        kept.sort_by_key(|c| c.source);
        out.extend(kept.iter().map(|c| (c.op, c.source)));
        start += node;
        node += 1;
    }
    Ok(out)
}

/// Discretizes both architecture tables: per edge the strongest non-zero op,
/// per node the two strongest incoming edges.
pub fn derive(alpha_normal: &Tensor, alpha_reduce: &Tensor, op_set: &OperationSet) -> Result<Genotype> {
    let normal = derive_cell(alpha_normal, op_set)?;
    let reduce = derive_cell(alpha_reduce, op_set)?;
    if normal.len() != reduce.len() {
        return Err(DassError::shape("derive", alpha_normal.shape(), alpha_reduce.shape()));
    }
    let n_inter = normal.len() / 2;
    Ok(Genotype {
        normal,
        reduce,
        concat_nodes: (2..2 + n_inter).collect(),
    })
}

/// Transformation applied to both architecture tables before re-deriving.
#[derive(Clone, Copy, Debug)]
pub enum AlphaTransform {
    Shift(f32),
    Scale(f32),
}

/// Checks that derivation is unchanged by `transform`.
///
/// A constant shift must leave the whole genotype unchanged. A positive
/// scaling changes the softmax temperature, which preserves each edge's
/// argmax but may reorder edge strengths across edges, so scalings are
/// compared on per-edge op choices.
pub fn argmax_invariance_check(
    alpha_normal: &Tensor,
    alpha_reduce: &Tensor,
    op_set: &OperationSet,
    transform: AlphaTransform,
) -> Result<bool> {
    let apply = |t: &Tensor| -> Result<Tensor> {
        let data = t
            .data()
            .iter()
            .map(|&v| match transform {
                AlphaTransform::Shift(c) => v + c,
                AlphaTransform::Scale(s) => v * s,
            })
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    };
    let (tn, tr) = (apply(alpha_normal)?, apply(alpha_reduce)?);
    match transform {
        AlphaTransform::Shift(_) => Ok(derive(alpha_normal, alpha_reduce, op_set)? == derive(&tn, &tr, op_set)?),
        AlphaTransform::Scale(s) => {
            if s <= 0.0 {
                return Err(DassError::Invalid(format!("scale must be positive, got {s}")));
            }
            let ops = |a: &Tensor| -> Result<Vec<usize>> {
                Ok(edge_choices(a, op_set)?.into_iter().map(|c| c.op_index).collect())
            };
            Ok(ops(alpha_normal)? == ops(&tn)? && ops(alpha_reduce)? == ops(&tr)?)
        }
    }
}

impl Genotype {
    pub fn n_intermediate(&self) -> usize {
        self.normal.len() / 2
    }

    /// Masked weights of the network this genotype instantiates under `config`.
    pub fn sparse_numel(&self, config: &NetConfig) -> usize {
        let opts = config.op_options();
        let cells: usize = config
            .plan()
            .iter()
            .map(|p| {
                let pairs = if p.reduction { &self.reduce } else { &self.normal };
                pairs.iter().map(|(op, _)| op.sparse_numel(p.channels, opts)).sum::<usize>()
            })
            .sum();
        cells + config.final_channels() * config.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        for (name, cell) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            if cell.is_empty() || cell.len() % 2 != 0 {
                return Err(DassError::Genotype(format!(
                    "{name} cell needs two edges per intermediate node, got {} edges",
                    cell.len()
                )));
            }
            for (i, pair) in cell.chunks(2).enumerate() {
                let node = i + 2;
                for &(op, src) in pair {
                    if src >= node {
                        return Err(DassError::Genotype(format!(
                            "{name} cell: edge {op} into node {node} comes from node {src}"
                        )));
                    }
                }
                if pair[0].1 == pair[1].1 {
                    return Err(DassError::Genotype(format!(
                        "{name} cell: node {node} takes source {} twice",
                        pair[0].1
                    )));
                }
            }
        }
        if self.normal.len() != self.reduce.len() {
            return Err(DassError::Genotype("normal and reduce cells differ in node count".into()));
        }
        let expected: Vec<usize> = (2..2 + self.n_intermediate()).collect();
        if self.concat_nodes != expected {
            return Err(DassError::Genotype(format!(
                "concat_nodes {:?} must list every intermediate node {expected:?}",
                self.concat_nodes
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates a genotype document. Parse errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let g: Genotype = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }
}
