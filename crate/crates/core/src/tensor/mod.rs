//! Dense rank-3 feature volumes and the CPU kernels that operate on them.
//!
//! A [`Tensor`] is stored channel-major, then row-major: element `(c, y, x)`
//! lives at `c * H * W + y * W + x`. Storage is generic over [`Real`] so the
//! same kernels run in `f32` for inference/training and in `f64` for
//! finite-difference gradient checks. Reductions always accumulate in `f64`.

mod conv;
mod ops;
mod pool;

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub};

pub use conv::{
    backward_batch_norm, backward_bias, backward_conv2d, backward_convolve, batch_norm, bias_add,
    conv2d, conv2d_cached, convolve, Activation, BatchNorm, ConvCache, ConvGrads, ConvParams,
    NormGrads, Normalization, DEFAULT_BN_EPSILON,
};
pub use ops::{
    backward_concat_channels, backward_leaky_relu, backward_reorg, backward_sigmoid,
    concat_channels, leaky_relu, reorg, reorg_inverse, sigmoid, sigmoid_scalar, DEFAULT_LEAKY_SLOPE,
};
pub use pool::{backward_maxpool2, maxpool2};

/// Scalar storage type for tensors.
pub trait Real:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn exp(self) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f32::exp(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("shape error in {op}: {reason}")]
pub struct ShapeError {
    pub op: &'static str,
    pub reason: String,
}

impl ShapeError {
    pub(crate) fn new(op: &'static str, reason: impl Into<String>) -> Self {
        Self {
            op,
            reason: reason.into(),
        }
    }
}

/// Shape of a tensor as `(channels, height, width)`.
pub type Shape = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self, ShapeError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(ShapeError::new(
                "tensor",
                format!("dimensions must be >= 1, got {channels}x{height}x{width}"),
            ));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(ShapeError::new(
                "tensor",
                format!("data length {} != {channels}x{height}x{width} = {expected}", data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, T::ZERO)
    }

    /// Panics if any dimension is zero.
    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        assert!(
            channels > 0 && height > 0 && width > 0,
            "tensor dimensions must be >= 1"
        );
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut t = Self::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    t.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        t
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub(crate) fn expect_shape(&self, op: &'static str, what: &str, shape: Shape) -> Result<(), ShapeError> {
        if self.shape() != shape {
            return Err(ShapeError::new(
                op,
                format!("{what} has shape {:?}, expected {:?}", self.shape(), shape),
            ));
        }
        Ok(())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<(), ShapeError> {
        other.expect_shape("add", "rhs", self.shape())?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    /// Sum of squares accumulated in `f64`.
    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum()
    }
}
