//! Central finite-difference gradient checks.
//!
//! Every check reduces the output `y` to the scalar `sum(y * r)` for a random
//! projection `r`. Differences are taken on an f64 reference forward, so f32
//! rounding in the library does not swamp the `1e-3` step.

use dass::rng::RunRng;
use dass::tensor::{Tape, Tensor, Var};

pub const EPS: f32 = 1e-3;

/// Output of one evaluation: the raw output and, when asked, the gradient of
/// `sum(y * r)` with respect to every input (`None` for non-differentiable ones).
pub struct Eval {
    pub output: Tensor,
    pub grads: Vec<Option<Tensor>>,
}

/// `inputs` -> output, optionally with gradients of `sum(output * r)`.
pub type EvalFn<'a> = dyn Fn(&[Tensor], Option<&Tensor>) -> Eval + 'a;

pub fn random_tensor(rng: &mut RunRng, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, std)).collect()).unwrap()
}

/// Values at least `gap` apart in random order, so max and ReLU kinks stay
/// outside the finite-difference stencil.
pub fn spread_tensor(rng: &mut RunRng, shape: &[usize], gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let offset = -(n as f32) * gap / 2.0 + gap / 2.0;
    let data = rng.permutation(n).into_iter().map(|i| offset + i as f32 * gap).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Moves entries with `|v| < margin` out to `+-margin`.
pub fn away_from_zero(mut t: Tensor, margin: f32) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin - v.abs() } else { margin + *v };
        }
    }
    t
}

/// Reference forward in f64 over flattened inputs.
pub type RefFn<'a> = dyn Fn(&[Vec<f64>]) -> Vec<f64> + 'a;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn projected(y: &[f64], r: &Tensor) -> f64 {
    y.iter().zip(r.data()).map(|(a, b)| a * *b as f64).sum()
}

/// Errors of one randomized case.
#[derive(Clone, Copy, Debug, Default)]
pub struct Outcome {
    /// Largest norm-wise relative gradient error over the differentiable inputs.
    pub grad: f64,
    /// Largest forward deviation from the reference, relative to `max(1, |y|)`.
    pub forward: f64,
}

impl Outcome {
    pub fn max(self, o: Outcome) -> Outcome {
        Outcome {
            grad: self.grad.max(o.grad),
            forward: self.forward.max(o.forward),
        }
    }
}

/// Compares autodiff gradients of `sum(y * r)` with central differences of
/// the f64 reference, and the f32 forward with the reference forward.
pub fn check(eval: &EvalFn, reference: &RefFn, inputs: &[Tensor], rng: &mut RunRng) -> Outcome {
    let out = eval(inputs, None).output;
    let base: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let y_ref = reference(&base);
    assert_eq!(y_ref.len(), out.numel(), "reference output size");
    let forward = out
        .data()
        .iter()
        .zip(&y_ref)
        .map(|(a, b)| (*a as f64 - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max);
    let r = random_tensor(rng, out.shape(), 1.0);
    let grads = eval(inputs, Some(&r)).grads;
    let step = EPS as f64;
    let mut worst = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let mut moved = base.clone();
        let mut fd = Vec::with_capacity(base[i].len());
        for j in 0..base[i].len() {
            let orig = base[i][j];
            moved[i][j] = orig + step;
            let up = projected(&reference(&moved), &r);
            moved[i][j] = orig - step;
            let down = projected(&reference(&moved), &r);
            moved[i][j] = orig;
            fd.push((up - down) / (2.0 * step));
        }
        let auto: Vec<f64> = g.data().iter().map(|&v| v as f64).collect();
        assert_eq!(auto.len(), fd.len(), "gradient shape of input {i}");
        let diff: Vec<f64> = auto.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let scale = norm(&auto).max(norm(&fd));
        let err = if scale < 1e-6 { norm(&diff) } else { norm(&diff) / scale };
        worst = worst.max(err);
    }
    Outcome { grad: worst, forward }
}

/// Evaluates a closure over tape values. Inputs flagged in `diff` become
/// gradient-requiring leaves, the rest constants.
pub fn on_tape<'a, F>(diff: &'a [bool], build: F) -> impl Fn(&[Tensor], Option<&Tensor>) -> Eval + 'a
where
    F: Fn(&mut Tape, &[Var]) -> Var + 'a,
{
    move |inputs, r| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(diff)
            .map(|(t, &d)| {
                if d && r.is_some() {
                    tape.input(t.clone()).unwrap()
                } else {
                    tape.constant(t.clone()).unwrap()
                }
            })
            .collect();
        let y = build(&mut tape, &vars);
        let output = tape.value(y).clone();
        let Some(r) = r else {
            return Eval { output, grads: Vec::new() };
        };
        let rv = tape.constant(r.clone()).unwrap();
        let prod = tape.mul(y, rv).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let g = tape.backward(loss).unwrap();
        let grads = vars
            .iter()
            .enumerate()
            .map(|(i, v)| diff[i].then(|| g.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()))))
            .collect();
        Eval { output, grads }
    }
}

