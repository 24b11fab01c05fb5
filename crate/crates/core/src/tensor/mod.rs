//! Dense NHWC tensors and the layer primitives built on them.
//!
//! All primitives are pure functions of their inputs. Reductions run in a
//! fixed order (batch, then row, then column, then channel) so results are
//! reproducible run to run; the only parallelism is across batch items in
//! the convolution forward pass, where every item writes its own output.

mod activation;
mod conv;
mod norm;
mod pool;
mod transposed;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub(crate) use activation::dense_backward_from_logits;
pub use activation::{
    dense_softmax, dense_softmax_backward, relu, relu_backward, softmax_backward, DenseGrads, DenseParams,
};
pub(crate) use conv::{channel_sums, conv2d_accumulate, conv2d_grad_input_accumulate, conv2d_grad_kernel_accumulate};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvParams, Kernel};
pub(crate) use norm::batchnorm_apply;
pub use norm::{
    batchnorm, batchnorm_backward, batchnorm_inference, batchnorm_train_forward, lrn, lrn_backward, BatchNormCache,
    BatchNormParams, LrnParams, RunningStats,
};
pub use pool::{maxpool2x2, maxpool2x2_backward, PoolMask};
pub use transposed::{transposed_conv2d, transposed_conv2d_backward};
pub(crate) use transposed::{
    transposed_conv2d_accumulate, transposed_conv2d_grad_input_accumulate, transposed_conv2d_grad_kernel_accumulate,
};

/// Floating point element type of a [`Tensor`]; implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Extents of a 4-D tensor in (batch, height, width, channel) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Shape { batch, height, width, channels }
    }

    pub const fn len(&self) -> usize {
        self.batch * self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one batch item.
    pub const fn item_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    #[inline]
    pub const fn offset(&self, b: usize, i: usize, j: usize, k: usize) -> usize {
        ((b * self.height + i) * self.width + j) * self.channels + k
    }

    pub const fn with_channels(self, channels: usize) -> Self {
        Shape { channels, ..self }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.batch, self.height, self.width, self.channels)
    }
}

/// Dense row-major NHWC tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.len()] }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape("Tensor::from_vec", format!("{} values for shape {shape}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.batch {
            for i in 0..shape.height {
                for j in 0..shape.width {
                    for k in 0..shape.channels {
                        data.push(f(b, i, j, k));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    #[inline]
    pub fn get(&self, b: usize, i: usize, j: usize, k: usize) -> T {
        self.data[self.shape.offset(b, i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, i: usize, j: usize, k: usize, value: T) {
        let o = self.shape.offset(b, i, j, k);
        self.data[o] = value;
    }

    /// Contiguous slice of batch item `b`.
    pub fn item(&self, b: usize) -> &[T] {
        let n = self.shape.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.len() != self.shape.len() {
            return Err(Error::shape("Tensor::reshape", format!("{} into {shape}", self.shape)));
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("Tensor::add_assign", format!("{} += {}", self.shape, other.shape)));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Inner product accumulated in f64.
    pub fn dot(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("Tensor::dot", format!("{} . {}", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a.to_f64_lossy() * b.to_f64_lossy()).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("Tensor::max_abs_diff", format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs().to_f64_lossy()).fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect() }
    }

    /// Selects batch rows in the given order.
    pub fn select_batch(&self, rows: &[usize]) -> Result<Self> {
        let n = self.shape.item_len();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= self.shape.batch {
                return Err(Error::shape("Tensor::select_batch", format!("row {r} of {}", self.shape.batch)));
            }
            data.extend_from_slice(&self.data[r * n..(r + 1) * n]);
        }
        Ok(Tensor { shape: Shape { batch: rows.len(), ..self.shape }, data })
    }
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with eight independent partial sums, combined in a fixed order.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let rem_a = chunks_a.remainder();
    let rem_b = chunks_b.remainder();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in rem_a.iter().zip(rem_b) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}
