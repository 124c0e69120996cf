//! Dense tensors, the autodiff graph, parameter storage and checkpoints.

mod checkpoint;
mod graph;
mod store;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{Graph, TensorId};
pub use store::{AdamConfig, Init, ParamStore, ADAM_M_PREFIX, ADAM_STEP_KEY, ADAM_V_PREFIX, BN_MEAN_PREFIX, BN_VAR_PREFIX};

use crate::error::{Error, Result};

/// Dense row-major float tensor. `grad` is populated only on tracked tensors
/// after a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::invalid(format!("tensor extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} implies {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values, grad: None, requires_grad: false })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn row(values: Vec<f32>) -> Self {
        let n = values.len();
        Tensor { shape: vec![1, n], values, grad: None, requires_grad: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel], grad: None, requires_grad: false }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// (rows, cols) view of a rank-1 or rank-2 tensor; rank-1 reads as one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::invalid(format!("expected rank <= 2 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
            && self.grad.as_ref().map_or(true, |g| g.iter().all(|v| v.is_finite()))
    }
}

/// Sum with a 64-bit accumulator once the reduction is long enough for
/// f32 roundoff to matter.
pub(crate) fn acc_sum(values: &[f32]) -> f32 {
    if values.len() > 1024 {
        values.iter().map(|&v| v as f64).sum::<f64>() as f32
    } else {
        values.iter().sum()
    }
}

/// Dot product with the same accumulation rule as [`acc_sum`].
pub(crate) fn acc_dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() > 1024 {
        a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() as f32
    } else {
        a.iter().zip(b).map(|(&x, &y)| x * y).sum()
    }
}
