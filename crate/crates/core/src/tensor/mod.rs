//! Dense tensors, a reverse-mode tape, parameter storage and SGD.
//!
//! Values are `f32` in row-major order. Image tensors use NCHW layout.
//! Every reduction runs sequentially in ascending index order so that two
//! runs with identical inputs produce bitwise-identical results.

pub mod kernels;
mod optim;
mod params;
mod tape;

pub use kernels::{ConvGeom, PoolGeom};
pub use optim::{cosine_lr, sgd_step, OptimState, Sgd};
pub use params::{KindSet, Param, ParamId, ParamKind, ParamStore};
pub use tape::{BnStats, Grads, Tape, Var};

use crate::error::{DassError, Result};

/// A dense n-dimensional array of `f32`.
///
/// The empty shape denotes a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(DassError::Invalid(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DassError::Invalid(format!(
                "tensor shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// A one-dimensional tensor holding `data`.
    pub fn from_vec(data: Vec<f32>) -> Self {
        assert!(!data.is_empty(), "from_vec on empty data");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(DassError::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
