//! Dense tensor engine with reverse-mode differentiation.
//!
//! Exactly the primitives the denoiser stack needs: affine maps, row softmax
//! and layer norm, a first-order linear recurrence scan, a handful of
//! elementwise ops, cross entropy, embedding lookup, and the reshuffling ops
//! (slice/concat/tile/reverse) that wire mixers together. Everything runs in
//! either single precision (training, benchmarks) or double precision
//! (gradient checks and oracle suites) via the [`Element`] parameter.

mod check;
mod exec;
mod graph;
pub(crate) mod kernels;

pub use check::finite_difference_check;
pub use exec::{Eager, Exec};
pub use graph::{Graph, GradStore, NodeId};

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Scalar element: `f32` for the training/bench path, `f64` for reference math.
pub trait Element:
    Copy
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    const PRECISION: Precision;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    /// 1 when the value is NaN/Inf, else 0. Integer form so whole-buffer
    /// checks vectorize as an OR-reduction.
    fn non_finite_bit(self) -> u32;
    fn maximum(self, other: Self) -> Self;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const PRECISION: Precision = Precision::Single;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn ln_1p(self) -> Self {
        f32::ln_1p(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn non_finite_bit(self) -> u32 {
        ((self.to_bits() >> 23) & 0xff == 0xff) as u32
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const PRECISION: Precision = Precision::Double;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn non_finite_bit(self) -> u32 {
        ((self.to_bits() >> 52) & 0x7ff == 0x7ff) as u32
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
}

/// Dense n-dimensional array in row-major order with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(Error::dimension("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_f64s(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&x| E::from_f64(x)).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::ZERO; numel],
            grad: None,
        }
    }

    /// Kernel-internal constructor: the caller guarantees the length.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::from_f64(v); numel],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::full(vec![1], v)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Product of all leading axes (numel / cols).
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn precision(&self) -> Precision {
        E::PRECISION
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<E>) {
        debug_assert_eq!(g.len(), self.data.len());
        self.grad = Some(g);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Scalar payload of a one-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast between precisions through f64.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }

    /// Fill from a generator of f64 values, row-major.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(|i| E::from_f64(f(i))).collect(),
            grad: None,
        }
    }
}
