//! Dense N-D tensors with a small reverse-mode autodiff tape.
//!
//! Everything the segmentation network needs lives here: convolutions (and
//! their transposes) over 2-D and 3-D volumes, batch normalization,
//! activations, channel concatenation, and residual addition. Tensors are
//! plain row-major buffers; the [`Tape`] records operations on copies of them
//! and replays the chain rule in reverse.
//!
//! Convolutions follow the cross-correlation convention (the kernel is not
//! flipped), the same as mainstream deep-learning frameworks.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{finite_difference_gradient, max_relative_error};
pub use kernels::{conv_output_len, conv_transpose_output_len};
pub use tape::{Activation, BackwardFn, BatchNormMode, Gradients, Tape, Var};
#[allow(unused_imports)]
pub(crate) use tape::sigmoid;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}: dimensions must be non-empty and positive")]
    InvalidShape(Vec<usize>),
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: channel mismatch, expected {expected}, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: unsupported rank {rank} (expected spatial rank 2 or 3)")]
    UnsupportedRank { op: &'static str, rank: usize },
    #[error("{op}: output dimension would be smaller than 1")]
    OutputTooSmall { op: &'static str },
    #[error("batch_norm: train mode needs at least 2 values per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: tape already consumed")]
    TapeConsumed,
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("{0}: produced a non-finite value")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Numeric element type of a tensor. Implemented for `f32` (the default
/// training width) and `f64` (used for gradient checks).
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c = a·b + beta·c` on row-major buffers, where `a` is `m×k` (or `k×m`
    /// when `trans_a`) and `b` is `k×n` (or `n×k` when `trans_b`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // (row stride, col stride) of the logical rows×cols operand
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = gemm_strides(m, k, trans_a);
                let (rsb, csb) = gemm_strides(k, n, trans_b);
                // SAFETY: the asserted buffer lengths cover every index the
                // strides above can address.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

/// Initialization scheme for [`Tensor::create`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    /// Normal with std `sqrt(2 / fan_in)`, fan_in being the product of all
    /// dimensions after the first.
    HeNormal { seed: u64 },
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if data.len() != len {
            return Err(TensorError::LengthMismatch {
                op: "tensor",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn create(shape: &[usize], init: Init) -> Result<Self> {
        let len = check_shape(shape)?;
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); len],
            Init::Constant(c) => vec![T::lit(c); len],
            Init::Uniform { lo, hi, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = Uniform::new_inclusive(lo, hi);
                (0..len).map(|_| T::lit(dist.sample(&mut rng))).collect()
            }
            Init::HeNormal { seed } => {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let std = (2.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..len).map(|_| T::lit(dist.sample(&mut rng))).collect()
            }
        };
        Self::new(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Init::Zeros)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::create(shape, Init::Constant(value))
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::LengthMismatch {
                op: "accumulate_grad",
                len: g.len(),
                shape: self.shape.clone(),
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same shape, values converted to another element type. Gradient state is
    /// not carried over.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Copy of the values without gradient bookkeeping.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                expected: self.shape,
                got: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }
}
