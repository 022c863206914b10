//! Dense 4-D tensors, the differentiable operator set, and a tape for
//! reverse-mode gradients.
//!
//! Storage is generic over [`Element`] so the same operators run in `f32`
//! for training and `f64` for finite-difference checking. Every reduction
//! inside a kernel accumulates in `f64` regardless of the storage type.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

use std::fmt;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, finite_diff_check_with, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

/// Scalar storage type of a [`Tensor`].
pub trait Element: Float + Default + Send + Sync + fmt::Debug + fmt::Display + 'static {
    const NAME: &'static str;

    fn narrow(v: f64) -> Self;

    fn widen(self) -> f64;
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }
}

/// `(batch, channels, rows, cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one `h × w` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one batch entry.
    pub const fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Row-major `(N, C, H, W)` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::config(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn from_f64_slice(shape: Shape, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::narrow(v)).collect())
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::narrow(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: T) {
        let i = self.shape.offset(n, c, h, w);
        self.data[i] = value;
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::usage(format!(
                "item() on non-scalar tensor of shape {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::narrow(v.widen())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v.widen()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns an error naming `context` if any element is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numeric(format!(
                "{context}: non-finite value {} at flat index {i} of tensor {}",
                self.data[i], self.shape
            ))),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.widen() - b.widen()).abs())
            .fold(0.0, f64::max)
    }

    /// Batch entry `i` as a `(1, C, H, W)` tensor.
    pub fn sample(&self, i: usize) -> Tensor<T> {
        let len = self.shape.sample();
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[i * len..(i + 1) * len].to_vec(),
        }
    }

    /// Channels `start..start + len` of every batch entry.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let s = self.shape;
        if start + len > s.c {
            return Err(Error::config(format!(
                "channel slice {start}..{} out of range for {s}",
                start + len
            )));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Tensor {
            shape: Shape::new(s.n, len, s.h, s.w),
            data,
        })
    }

    /// Concatenates along the batch axis.
    pub fn stack_batch<B: std::borrow::Borrow<Tensor<T>>>(parts: &[B]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .map(|p| p.borrow())
            .ok_or_else(|| Error::usage("stack_batch of an empty list"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * parts.len());
        let mut n = 0;
        for (i, p) in parts.iter().enumerate() {
            let p = p.borrow();
            if (p.shape.c, p.shape.h, p.shape.w) != (s.c, s.h, s.w) {
                return Err(Error::config(format!(
                    "stack_batch part {i} has shape {}, expected (*, {}, {}, {})",
                    p.shape, s.c, s.h, s.w
                )));
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, s.c, s.h, s.w),
            data,
        })
    }
}
