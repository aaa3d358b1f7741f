//! Forward context and the dense building blocks shared by every network.

use crate::error::Result;
use crate::rng::RunRng;
use crate::sparse::ForwardMode;
use crate::tensor::{ConvGeom, KindSet, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Per-forward settings.
pub struct Ctx<'t> {
    pub tape: &'t mut Tape,
    pub mode: ForwardMode,
    /// Batch-norm uses batch statistics and updates running averages when set.
    pub train: bool,
    /// Parameter kinds recorded as gradient-requiring leaves.
    pub trainable: KindSet,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t mut Tape, mode: ForwardMode, train: bool, trainable: KindSet) -> Self {
        Self {
            tape,
            mode,
            train,
            trainable,
        }
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let requires_grad = self.trainable.contains(store.get(id).kind);
        self.tape.param(store, id, requires_grad)
    }
}

/// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init(rng: &mut RunRng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Batch normalization with running statistics and optional affine parameters.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    running_mean: ParamId,
    running_var: ParamId,
    affine: Option<(ParamId, ParamId)>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, affine: bool) -> Result<Self> {
        let running_mean = store.add(format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels]))?;
        let running_var = store.add(format!("{prefix}.running_var"), ParamKind::Buffer, Tensor::ones(&[channels]))?;
        let affine = if affine {
            let g = store.add(format!("{prefix}.gamma"), ParamKind::Affine, Tensor::ones(&[channels]))?;
            let b = store.add(format!("{prefix}.beta"), ParamKind::Affine, Tensor::zeros(&[channels]))?;
            Some((g, b))
        } else {
            None
        };
        Ok(Self {
            channels,
            running_mean,
            running_var,
            affine,
        })
    }

    pub fn param_count(&self) -> usize {
        if self.affine.is_some() {
            2 * self.channels
        } else {
            0
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &mut ParamStore, x: Var) -> Result<Var> {
        let (gamma, beta) = match self.affine {
            Some((g, b)) => (Some(ctx.param(store, g)?), Some(ctx.param(store, b)?)),
            None => (None, None),
        };
        if ctx.train {
            let (y, stats) = ctx.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
            for (id, batch) in [(self.running_mean, &stats.mean), (self.running_var, &stats.var)] {
                for (r, b) in store.value_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
            Ok(y)
        } else {
            let mean = store.value(self.running_mean).data().to_vec();
            let var = store.value(self.running_var).data().to_vec();
            ctx.tape.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
        }
    }
}

/// A dense (never masked) convolution without bias.
#[derive(Clone, Debug)]
pub struct DenseConv {
    pub weight: ParamId,
    pub geom: ConvGeom,
}

impl DenseConv {
    #[allow(clippy::too_many_arguments)]
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
        let weight = store.add(name, ParamKind::Weight, uniform_init(rng, &shape, fan_in))?;
        Ok(Self { weight, geom })
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.value(self.weight).numel()
    }

    pub fn forward(&self, ctx: &mut Ctx, store: &ParamStore, x: Var) -> Result<Var> {
        let w = ctx.param(store, self.weight)?;
        ctx.tape.conv2d(x, w, self.geom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::ForwardMode;

    #[test]
    fn running_statistics_track_training_batches() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2, true).unwrap();
        assert_eq!(bn.param_count(), 4);
        // channel 0 holds 1..4, channel 1 holds 10 everywhere
        let x = Tensor::new(vec![2, 2, 1, 2], vec![1.0, 2.0, 10.0, 10.0, 3.0, 4.0, 10.0, 10.0]).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, ForwardMode::Dense, true, KindSet::NONE);
        let xv = ctx.tape.constant(x.clone()).unwrap();
        let y = bn.forward(&mut ctx, &mut store, xv).unwrap();
        let mean = store.value(store.id("bn.running_mean").unwrap()).data().to_vec();
        let var = store.value(store.id("bn.running_var").unwrap()).data().to_vec();
        assert!((mean[0] - 0.25).abs() < 1e-6 && (mean[1] - 1.0).abs() < 1e-6);
        // running variance uses the unbiased estimate: 5/3 for 1..4
        let run_var = 0.9 + 0.1 * 5.0 / 3.0;
        assert!((var[0] - run_var).abs() < 1e-6 && (var[1] - 0.9).abs() < 1e-6);
        let out = tape.value(y).data();
        assert!((out[0] + out[1] + out[4] + out[5]).abs() < 1e-5);

        // eval mode reads the running statistics and leaves them alone
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, ForwardMode::Dense, false, KindSet::NONE);
        let xv = ctx.tape.constant(x).unwrap();
        let y = bn.forward(&mut ctx, &mut store, xv).unwrap();
        let expect = (1.0 - 0.25) / (run_var + BN_EPS).sqrt();
        assert!((tape.value(y).data()[0] - expect).abs() < 1e-5);
        assert_eq!(store.value(store.id("bn.running_mean").unwrap()).data(), &mean[..]);
    }

    #[test]
    fn params_need_gradients_only_when_trainable() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamKind::Weight, Tensor::ones(&[2])).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, ForwardMode::Dense, true, KindSet::NONE);
        let frozen = ctx.param(&store, id).unwrap();
        let mut ctx2 = Ctx::new(&mut tape, ForwardMode::Dense, true, KindSet::of(&[ParamKind::Weight]));
        let live = ctx2.param(&store, id).unwrap();
        let s = tape.add(frozen, live).unwrap();
        let l = tape.sum_all(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(frozen).is_none());
        assert_eq!(g.wrt(live).unwrap().data(), &[1.0, 1.0]);
    }
}
