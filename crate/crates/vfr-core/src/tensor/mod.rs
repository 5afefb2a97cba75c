//! Dense f32 tensors with reverse-mode gradients.
//!
//! The canonical layout for image data is NCHW (batch, channel, height,
//! width) in row-major order. Forward operations live in [`ops`] as pure
//! functions; [`tape::Tape`] records them for reverse-mode differentiation;
//! [`optim`] holds parameter state and the Adam update.

pub mod check;
pub mod ops;
pub mod optim;
pub mod tape;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid argument, {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("batchnorm: degenerate statistics, batch*H*W must exceed 1 per channel in train mode")]
    DegenerateBatchStats,
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("adam_step: non-finite gradient in parameter group '{name}'")]
    NonFiniteGradient { name: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense f32 tensor. The gradient buffer is present iff the tensor
/// requires gradients, and always matches `data` in length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidArgument {
                op: "tensor",
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        if data.len() != numel {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                detail: format!("data length {} != product of shape {shape:?}", data.len()),
            });
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], grad: None }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|i| f(i)).collect();
        Tensor { shape: shape.to_vec(), data, grad: None }
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

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Attach (or drop) the gradient buffer. Attaching zero-fills it.
    pub fn set_requires_grad(&mut self, on: bool) {
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![0.0; self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Add `delta` into the gradient buffer. No-op on tensors without one.
    pub fn accumulate_grad(&mut self, delta: &[f32]) {
        if let Some(g) = self.grad.as_mut() {
            debug_assert_eq!(g.len(), delta.len());
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
    }

    /// Interpret as (batch, channel, height, width).
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected rank-4 NCHW tensor, got shape {:?}", self.shape),
            }),
        }
    }

    /// Interpret as (batch, channel).
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, c] => Ok((n, c)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected rank-2 tensor, got shape {:?}", self.shape),
            }),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value at (n, c, h, w). Test and debugging helper; panics out of range.
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        let (_, cs, hs, ws) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cs + c) * hs + h) * ws + w]
    }
}
