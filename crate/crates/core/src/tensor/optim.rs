use super::{Param, ParamId, ParamStore, Tensor};
use crate::error::{DassError, Result};

/// SGD hyperparameters plus the momentum buffer of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub velocity: Tensor,
}

impl OptimState {
    pub fn new(shape: &[usize], lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Tensor::zeros(shape),
        }
    }
}

/// One SGD step: `v <- momentum * v + grad + weight_decay * p; p <- p - lr * v`.
/// Clears the gradient.
pub fn sgd_step(param: &mut Param, state: &mut OptimState) -> Result<()> {
    let grad = param
        .grad
        .take()
        .ok_or_else(|| DassError::Optim(format!("parameter {} has no gradient", param.name)))?;
    if state.velocity.shape() != param.value.shape() {
        return Err(DassError::shape("sgd_step", state.velocity.shape(), param.value.shape()));
    }
    let (lr, mom, wd) = (state.lr, state.momentum, state.weight_decay);
    for ((p, v), g) in param
        .value
        .data_mut()
        .iter_mut()
        .zip(state.velocity.data_mut())
        .zip(grad.data())
    {
        *v = mom * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Cosine-annealed learning rate, `lr0 * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f32) -> Result<f32> {
    if total_steps == 0 || step > total_steps {
        return Err(DassError::Invalid(format!(
            "cosine schedule step {step} outside [0, {total_steps}]"
        )));
    }
    let t = step as f64 / total_steps as f64;
    Ok((lr0 as f64 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0) as f32)
}

/// SGD over a fixed group of parameters.
#[derive(Clone, Debug)]
pub struct Sgd {
    states: Vec<(ParamId, OptimState)>,
}

impl Sgd {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, lr: f32, momentum: f32, weight_decay: f32) -> Self {
        let states = params
            .into_iter()
            .map(|id| (id, OptimState::new(store.value(id).shape(), lr, momentum, weight_decay)))
            .collect();
        Self { states }
    }

    pub fn set_lr(&mut self, lr: f32) {
        for (_, s) in &mut self.states {
            s.lr = lr;
        }
    }

    pub fn lr(&self) -> f32 {
        self.states.first().map_or(0.0, |(_, s)| s.lr)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.states.iter().map(|(id, _)| *id)
    }

    /// Updates every parameter of the group. Each must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (id, state) in &mut self.states {
            sgd_step(store.get_mut(*id), state)?;
        }
        Ok(())
    }

    pub fn velocities(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.states.iter().map(|(id, s)| (*id, &s.velocity))
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Tensor) -> Result<()> {
        let (_, state) = self
            .states
            .iter_mut()
            .find(|(pid, _)| *pid == id)
            .ok_or_else(|| DassError::Optim(format!("parameter {} not in optimizer group", id.0)))?;
        if state.velocity.shape() != v.shape() {
            return Err(DassError::shape("set_velocity", state.velocity.shape(), v.shape()));
        }
        state.velocity = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;

    fn param(value: f32, grad: Option<f32>) -> Param {
        Param {
            name: "p".into(),
            kind: ParamKind::Weight,
            value: Tensor::from_vec(vec![value]),
            grad: grad.map(|g| Tensor::from_vec(vec![g])),
        }
    }

    #[test]
    fn plain_descent_step() {
        let mut p = param(1.0, Some(1.0));
        let mut s = OptimState::new(&[1], 0.1, 0.0, 0.0);
        sgd_step(&mut p, &mut s).unwrap();
        assert!((p.value.item() - 0.9).abs() < 1e-7);
        assert!(p.grad.is_none());
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = param(0.37, Some(0.0));
        let mut s = OptimState::new(&[1], 0.1, 0.0, 0.0);
        sgd_step(&mut p, &mut s).unwrap();
        assert_eq!(p.value.item(), 0.37);
    }

    #[test]
    fn momentum_unrolls_by_hand() {
        let mut p = param(1.0, Some(1.0));
        let mut s = OptimState::new(&[1], 0.1, 0.9, 0.0);
        sgd_step(&mut p, &mut s).unwrap();
        p.grad = Some(Tensor::from_vec(vec![1.0]));
        sgd_step(&mut p, &mut s).unwrap();
        // 1 - 0.1 - 0.1 * 1.9
        assert!((p.value.item() - 0.71).abs() < 1e-6, "{}", p.value.item());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = param(1.0, None);
        let mut s = OptimState::new(&[1], 0.1, 0.9, 0.0);
        assert!(sgd_step(&mut p, &mut s).is_err());
    }

    #[test]
    fn weight_decay_enters_velocity() {
        let mut p = param(2.0, Some(0.0));
        let mut s = OptimState::new(&[1], 0.5, 0.0, 0.1);
        sgd_step(&mut p, &mut s).unwrap();
        assert!((p.value.item() - 1.9).abs() < 1e-7);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.025).unwrap(), 0.025);
        assert!(cosine_lr(10, 10, 0.025).unwrap().abs() < 1e-9);
        assert!((cosine_lr(5, 10, 0.1).unwrap() - 0.05).abs() < 1e-8);
        assert!(cosine_lr(11, 10, 0.1).is_err());
        assert!(cosine_lr(0, 0, 0.1).is_err());
    }
}
