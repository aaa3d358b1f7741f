//! Parameter census, efficiency ratios, rank correlation and run reports.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DassError, Result};
use crate::nn::Ctx;
use crate::space::Network;
use crate::sparse::ForwardMode;
use crate::tensor::{KindSet, Tape, Tensor};

/// Activations per layer fed to the rank correlation.
pub const MAX_SIMILARITY_SAMPLES: usize = 4096;

/// Weight census of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Every weight and affine entry, masked positions included.
    pub total: usize,
    /// Surviving mask entries plus every unmasked tensor.
    pub nonzero: usize,
    /// Surviving mask entries only.
    pub masked_nonzero: usize,
    /// Sum of the per-layer retained counts.
    pub k_total: usize,
}

pub fn count_params(net: &dyn Network) -> ParamCount {
    let store = net.store();
    let total = store.numel_of(KindSet::theta());
    let sparse = net.sparse_params();
    let masked_numel: usize = sparse.iter().map(|p| p.numel(store)).sum();
    let masked_nonzero: usize = sparse.iter().map(|p| p.popcount(store)).sum();
    ParamCount {
        total,
        nonzero: total - masked_numel + masked_nonzero,
        masked_nonzero,
        k_total: sparse.iter().map(|p| p.k).sum(),
    }
}

/// Accuracy (percent) per thousand parameters.
pub fn nid(top1_percent: f64, params_thousands: f64) -> Result<f64> {
    if params_thousands.is_nan() || params_thousands <= 0.0 {
        return Err(DassError::Invalid(format!(
            "parameter count must be positive, got {params_thousands}"
        )));
    }
    Ok(top1_percent / params_thousands)
}

pub fn compression_rate(baseline_params: f64, params: f64) -> Result<f64> {
    if params.is_nan() || params <= 0.0 {
        return Err(DassError::Invalid(format!("parameter count must be positive, got {params}")));
    }
    Ok(baseline_params / params)
}

pub fn generalization_gap(train_acc: f64, test_acc: f64) -> f64 {
    train_acc - test_acc
}

/// Pairs `(t, t - 1) / 2` summed over runs of equal values in a sorted slice.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for i in 1..=sorted.len() {
        if i < sorted.len() && sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total
}

/// Stable merge sort that returns the number of inversions it removed.
fn sort_counting_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid], &mut buf[..mid]);
    swaps += sort_counting_swaps(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall's tau-b scaled to `[-100, 100]`, in `O(n log n)`.
///
/// Undefined (an error) when the lengths differ, fewer than two values are
/// given, a value is NaN, or either side is constant.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DassError::Invalid(format!("kendall_tau: lengths {} and {} differ", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(DassError::Invalid("kendall_tau needs at least two values".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(DassError::Invalid("kendall_tau: NaN input".into()));
    }
    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let ties_a = tied_pairs(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let ties_joint = tied_pairs(&pairs);
    let mut sorted_b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let swaps = sort_counting_swaps(&mut sorted_b, &mut buf);
    let ties_b = tied_pairs(&sorted_b);
    if ties_a == n0 || ties_b == n0 {
        return Err(DassError::Invalid("kendall_tau is undefined for a constant sequence".into()));
    }
    // concordant minus discordant
    let s = n0 as i64 - ties_a as i64 - ties_b as i64 + ties_joint as i64 - 2 * swaps as i64;
    Ok(s as f64 / (((n0 - ties_a) as f64) * ((n0 - ties_b) as f64)).sqrt() * 100.0)
}

/// Every `ceil(n / max)`-th value, so at most `max` remain.
fn strided_sample(values: &[f32], max: usize) -> Vec<f64> {
    let stride = values.len().div_ceil(max).max(1);
    values.iter().step_by(stride).map(|&v| v as f64).collect()
}

/// Runs both networks on `probe` in eval mode and returns the scaled tau
/// between matching cell outputs.
pub fn feature_map_similarity(
    net_a: &mut dyn Network,
    mode_a: ForwardMode,
    net_b: &mut dyn Network,
    mode_b: ForwardMode,
    probe: &Tensor,
) -> Result<Vec<f64>> {
    if net_a.n_cells() != net_b.n_cells() {
        return Err(DassError::Invalid(format!(
            "cannot compare networks with {} and {} cells",
            net_a.n_cells(),
            net_b.n_cells()
        )));
    }
    let acts_a = cell_activations(net_a, mode_a, probe)?;
    let acts_b = cell_activations(net_b, mode_b, probe)?;
    acts_a
        .iter()
        .zip(&acts_b)
        .enumerate()
        .map(|(i, (x, y))| {
            if x.shape() != y.shape() {
                return Err(DassError::Invalid(format!(
                    "cell {i} outputs differ in shape: {:?} vs {:?}",
                    x.shape(),
                    y.shape()
                )));
            }
            kendall_tau(
                &strided_sample(x.data(), MAX_SIMILARITY_SAMPLES),
                &strided_sample(y.data(), MAX_SIMILARITY_SAMPLES),
            )
        })
        .collect()
}

fn cell_activations(net: &mut dyn Network, mode: ForwardMode, probe: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, mode, false, KindSet::NONE);
    let x = ctx.tape.constant(probe.clone())?;
    let out = net.forward(&mut ctx, x)?;
    Ok(out.cell_outputs.iter().map(|&v| tape.value(v).clone()).collect())
}

/// Losses at the end of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCurve {
    pub phase: String,
    pub points: Vec<CurvePoint>,
}

/// Final measurements of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub pruning_ratio: f64,
    pub top1_accuracy: f64,
    pub train_accuracy: f64,
    pub params_total: usize,
    pub params_nonzero: usize,
    pub params_masked_nonzero: usize,
    pub k_total: usize,
    pub baseline_params: usize,
    pub compression_rate: f64,
    pub nid: f64,
    pub generalization_gap: f64,
    pub loss_curves: Vec<PhaseCurve>,
}

impl MetricsReport {
    pub fn check(&self) -> Result<()> {
        if self.params_nonzero > self.params_total {
            return Err(DassError::Invariant(format!(
                "nonzero parameters {} exceed total {}",
                self.params_nonzero, self.params_total
            )));
        }
        for (name, v) in [("top1_accuracy", self.top1_accuracy), ("train_accuracy", self.train_accuracy)] {
            if !(0.0..=100.0).contains(&v) {
                return Err(DassError::Invariant(format!("{name} = {v} outside [0, 100]")));
            }
        }
        Ok(())
    }

    /// Curves as `epoch,train_loss,val_loss`, epochs counted across phases in run order.
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| DassError::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["epoch", "train_loss", "val_loss"])?;
        let mut epoch = 0;
        for p in self.loss_curves.iter().flat_map(|c| &c.points) {
            epoch += 1;
            w.write_record([epoch.to_string(), p.train_loss.to_string(), p.val_loss.to_string()])?;
        }
        w.flush().map_err(|e| DassError::io(path, e))?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| DassError::io(path, e))?;
        f.write_all(serde_json::to_string_pretty(self)?.as_bytes())
            .map_err(|e| DassError::io(path, e))
    }
}
