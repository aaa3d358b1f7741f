//! Mini-batch loops shared by every phase.

use crate::data::{augment_batch, Dataset};
use crate::error::{DassError, Result};
use crate::nn::Ctx;
use crate::rng::RunRng;
use crate::space::Network;
use crate::sparse::ForwardMode;
use crate::tensor::{KindSet, Sgd, Tape, Tensor};

/// Index lists of one epoch: a fresh permutation cut into full batches,
/// at most `max_batches` of them. A split smaller than one batch becomes a single batch.
pub fn epoch_batches(rng: &mut RunRng, n: usize, batch: usize, max_batches: Option<usize>) -> Vec<Vec<usize>> {
    let perm = rng.permutation(n);
    let full = (n / batch).max(1);
    let count = max_batches.map_or(full, |m| full.min(m));
    (0..count)
        .map(|i| perm[i * batch..((i + 1) * batch).min(n)].to_vec())
        .collect()
}

/// Mini-batches per epoch for a split of `n` samples.
pub fn batches_per_epoch(n: usize, batch: usize, max_batches: Option<usize>) -> usize {
    let full = (n / batch).max(1);
    max_batches.map_or(full, |m| full.min(m))
}

/// Where an update happens, for diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct StepSite {
    pub phase: &'static str,
    pub epoch: usize,
    pub batch: usize,
}

/// What one update may touch.
#[derive(Clone, Copy, Debug)]
pub struct UpdateRule {
    pub mode: ForwardMode,
    pub trainable: KindSet,
    /// Kinds that must come out of the backward pass without gradient.
    pub forbidden: KindSet,
}

/// Loads a batch, augmenting it when asked.
pub fn load_batch(data: &Dataset, idx: &[usize], augment: Option<&mut RunRng>) -> (Tensor, Vec<usize>) {
    let (mut x, y) = data.batch(idx);
    if let Some(rng) = augment {
        let pad = (data.height / 8).max(1);
        augment_batch(&mut x, pad, rng);
    }
    (x, y)
}

/// One forward/backward/SGD update. Returns the batch loss.
///
/// Fails on a non-finite loss, and when any forbidden kind received a nonzero
/// gradient (checked on the gradient buffers before the step).
pub fn sgd_update(
    net: &mut dyn Network,
    opt: &mut Sgd,
    x: Tensor,
    labels: &[usize],
    rule: UpdateRule,
    site: StepSite,
) -> Result<f32> {
    net.store_mut().zero_grads();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, rule.mode, true, rule.trainable);
    let xv = ctx.tape.constant(x)?;
    let out = net.forward(&mut ctx, xv)?;
    let loss = ctx.tape.cross_entropy(out.logits, labels)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(DassError::NonFinite {
            phase: site.phase,
            epoch: site.epoch,
            batch: site.batch,
            lr: opt.lr(),
            loss: value,
        });
    }
    let grads = tape.backward(loss)?;
    let store = net.store_mut();
    grads.apply_to(store);
    let leaked = store.nonzero_grads(rule.forbidden);
    if !leaked.is_empty() {
        return Err(DassError::Invariant(format!(
            "{} epoch {} batch {}: frozen tensors received gradient: {}",
            site.phase,
            site.epoch,
            site.batch,
            leaked.join(", ")
        )));
    }
    opt.step(store)?;
    store.zero_grads();
    Ok(value)
}

/// Accuracy (percent) and mean loss over a whole split, batch norm in eval mode.
pub fn evaluate(net: &mut dyn Network, mode: ForwardMode, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, mode, false, KindSet::NONE);
        let xv = ctx.tape.constant(x)?;
        let out = net.forward(&mut ctx, xv)?;
        let loss = ctx.tape.cross_entropy(out.logits, &y)?;
        loss_sum += tape.value(loss).item() as f64 * chunk.len() as f64;
        let logits = tape.value(out.logits);
        let k = logits.shape()[1];
        for (r, &label) in y.iter().enumerate() {
            let row = &logits.data()[r * k..(r + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            correct += (best == label) as usize;
        }
    }
    let n = data.len().max(1) as f64;
    Ok((100.0 * correct as f64 / n, loss_sum / n))
}

pub fn mean(v: &[f32]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{NetConfig, Supernet};
    use crate::tensor::ParamKind;

    #[test]
    fn epochs_cut_full_batches() {
        let mut rng = RunRng::new(2);
        let b = epoch_batches(&mut rng, 70, 16, None);
        assert_eq!(b.len(), 4);
        assert!(b.iter().all(|x| x.len() == 16));
        let mut seen = b.concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 64);
        assert_eq!(epoch_batches(&mut rng, 70, 16, Some(2)).len(), 2);
        assert_eq!(batches_per_epoch(70, 16, Some(2)), 2);
        // a split smaller than a batch is one short batch
        let small = epoch_batches(&mut rng, 5, 16, None);
        assert_eq!(small.len(), 1);
        assert_eq!(small[0].len(), 5);
        assert_eq!(batches_per_epoch(5, 16, None), 1);
    }

    fn tiny_net() -> Supernet {
        let cfg = NetConfig {
            image_size: 8,
            n_cells: 2,
            n_nodes: 4,
            init_channels: 2,
            ..NetConfig::default()
        };
        Supernet::new(&cfg, &mut RunRng::new(1)).unwrap()
    }

    fn site() -> StepSite {
        StepSite { phase: "test", epoch: 0, batch: 0 }
    }

    #[test]
    fn update_moves_only_trainable_kinds() {
        let mut net = tiny_net();
        let weights = KindSet::of(&[ParamKind::Weight]);
        let others = KindSet::of(&[ParamKind::Alpha, ParamKind::Score, ParamKind::Mask, ParamKind::Affine]);
        let before = (net.store.fingerprint(weights), net.store.fingerprint(others));
        let mut opt = Sgd::new(&net.store, net.store.ids_of(weights), 0.1, 0.9, 0.0);
        let rule = UpdateRule {
            mode: ForwardMode::Dense,
            trainable: weights,
            forbidden: KindSet::of(&[ParamKind::Score, ParamKind::Mask]),
        };
        let x = Tensor::ones(&[2, 3, 8, 8]);
        let loss = sgd_update(&mut net, &mut opt, x, &[1, 2], rule, site()).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_ne!(net.store.fingerprint(weights), before.0);
        assert_eq!(net.store.fingerprint(others), before.1);
        assert!(net.store.nonzero_grads(KindSet::of(&ParamKind::ALL)).is_empty());
    }

    #[test]
    fn leaked_gradient_aborts_before_the_step() {
        let mut net = tiny_net();
        let weights = KindSet::of(&[ParamKind::Weight]);
        let before = net.store.fingerprint(weights);
        let mut opt = Sgd::new(&net.store, net.store.ids_of(weights), 0.1, 0.9, 0.0);
        let rule = UpdateRule {
            mode: ForwardMode::Dense,
            trainable: weights,
            forbidden: weights,
        };
        let err = sgd_update(&mut net, &mut opt, Tensor::ones(&[2, 3, 8, 8]), &[0, 1], rule, site()).unwrap_err();
        assert!(matches!(err, DassError::Invariant(_)));
        assert!(err.to_string().contains("test epoch 0 batch 0"));
        assert_eq!(net.store.fingerprint(weights), before);
    }

    #[test]
    fn mean_of_nothing_is_zero() {
        assert_eq!(mean(&[]), 0.0);
        assert_eq!(mean(&[1.0, 2.0]), 1.5);
    }
}
