//! Dense row-major f32 tensors and the reverse-mode tape built on them.

pub mod gradcheck;
mod linalg;
pub mod network;
pub mod optim;
pub mod tape;

pub use network::{gather_images, image_batch, ForwardPass, Layer, LayerOp, NetworkGraph, ParamStore, TapeBindings};
pub use optim::{lr_schedule, sgd_step};
pub use tape::{Gradients, NodeId, Tape};

use crate::error::{CoreError, CoreResult};
use crate::rng::Rng;

/// Dense tensor: `shape` (all dims >= 1) and row-major `data` with
/// `data.len() == product(shape)`. Scalars use shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> CoreResult<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(CoreError::Shape(format!("invalid tensor shape {:?}", shape)));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor { shape: vec![data.len().max(1)], data: if data.is_empty() { vec![0.0] } else { data } }
    }

    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.range(lo, hi)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn rand_normal(shape: &[usize], mean: f32, std: f32, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| mean + std * rng.normal()).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn reshaped(mut self, shape: Vec<usize>) -> CoreResult<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || numel != self.data.len() {
            return Err(CoreError::Shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) use linalg::{col2im_acc, im2col, mm_a_bt_acc, mm_acc, mm_at_b_acc};
