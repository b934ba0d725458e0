//! Dense 32-bit float tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the value type: a shape plus row-major `f32` storage behind
//! an `Arc` so clones are cheap. [`Tape`] records differentiable operations
//! during a forward pass and replays them in reverse; gradients of leaves
//! accumulate over all consumers in a fixed traversal order, so results are
//! reproducible bit-for-bit regardless of worker count.
//!
//! Storage is `f32` everywhere. Scalar reductions additionally carry an
//! `f64` sidecar value used by the finite-difference checker; double
//! precision otherwise appears only inside test oracles.

pub mod checkpoint;
mod conv;
mod gemm;
mod gradcheck;
mod ops;
mod optim;
pub mod rng;
mod tape;

pub use checkpoint::{
    load_checkpoint, load_tensors, save_checkpoint, save_tensors, FormatError, CHECKPOINT_MAGIC,
};
pub use gradcheck::{grad_check, grad_check_subset, GradCheckError};
pub use ops::softplus as softplus_f32;
pub use optim::{AdamW, OptimError, ParamId, ParamLeaves, ParamStore};
pub use tape::{BackwardCtx, CustomGrad, Gradients, Tape, TensorId, UnaryKind};

use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {a:?} and {b:?}")]
    ShapeMismatch { op: &'static str, a: Vec<usize>, b: Vec<usize> },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape { op: &'static str, expected: String, got: Vec<usize> },
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?} ({expect} elements)")]
    LengthMismatch { shape: Vec<usize>, len: usize, expect: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

/// Dense N-dimensional array of 32-bit floats, row-major.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    pub requires_grad: bool,
    /// Populated on parameter leaves by backward passes; same shape as data.
    pub grad: Option<Arc<Vec<f32>>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expect = numel(&shape);
        if expect != data.len() {
            return Err(TensorError::LengthMismatch { shape, len: data.len(), expect });
        }
        Ok(Tensor { shape, data: Arc::new(data), requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel(shape)]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel(shape)]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = numel(shape);
        let data: Vec<f32> = (0..n).map(|i| f(i)).collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data), requires_grad: false, grad: None }
    }

    /// Uniform values in `[lo, hi)` from a seeded generator.
    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Self {
        let mut s = rng::SplitMix::new(seed);
        Tensor::from_fn(shape, |_| lo + (hi - lo) * s.next_f32())
    }

    /// Standard normal values from a seeded generator.
    pub fn randn(shape: &[usize], seed: u64) -> Self {
        let mut s = rng::SplitMix::new(seed);
        Tensor::from_fn(shape, |_| s.next_normal())
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

    /// Mutable access to the underlying buffer, cloning if shared.
    pub fn data_mut(&mut self) -> &mut Vec<f32> {
        Arc::make_mut(&mut self.data)
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> f32 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape of identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        if numel(&shape) != self.numel() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: format!("{} elements", self.numel()),
                got: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }
}

/// Broadcast shape under trailing-dimension alignment. Dimensions align from
/// the right; each pair must be equal or one of them 1.
pub fn broadcast_shapes(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::ShapeMismatch { op, a: a.to_vec(), b: b.to_vec() });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Sums `grad` (of shape `from`) down to shape `to`, undoing broadcasting.
pub fn reduce_to_shape(grad: &[f32], from: &[usize], to: &[usize]) -> Vec<f32> {
    if from == to {
        return grad.to_vec();
    }
    let rank = from.len();
    let mut padded = vec![1usize; rank];
    let off = rank - to.len();
    padded[off..].copy_from_slice(to);

    let to_numel = numel(to);
    let mut out = vec![0.0f32; to_numel];
    let from_strides = strides(from);
    let padded_strides = strides(&padded);
    for (flat, &g) in grad.iter().enumerate() {
        let mut target = 0usize;
        for d in 0..rank {
            let coord = (flat / from_strides[d]) % from[d];
            if padded[d] != 1 {
                target += coord * padded_strides[d];
            }
        }
        out[target] += g;
    }
    out
}
