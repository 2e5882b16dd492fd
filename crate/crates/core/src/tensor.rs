//! Dense rank-5 feature tensors laid out as `(N, C, T, H, W)` in row-major order.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, t: usize, h: usize, w: usize) -> Self {
        Shape { n, c, t, h, w }
    }

    /// `(1, len, 1, 1, 1)`, the layout used for per-edge weight vectors.
    pub const fn vector(len: usize) -> Self {
        Shape::new(1, len, 1, 1, 1)
    }

    /// `(rows, cols, 1, 1, 1)`, the layout used for pointwise/linear weights.
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape::new(rows, cols, 1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.t * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of `(T, H, W)` positions per channel.
    pub const fn positions(&self) -> usize {
        self.t * self.h * self.w
    }

    pub const fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub const fn with_n(self, n: usize) -> Self {
        Shape { n, ..self }
    }

    pub const fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub const fn with_t(self, t: usize) -> Self {
        Shape { t, ..self }
    }

    pub const fn dims(&self) -> [usize; 5] {
        [self.n, self.c, self.t, self.h, self.w]
    }

    #[inline]
    pub const fn offset(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> usize {
        (((n * self.c + c) * self.t + t) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.n, self.c, self.t, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![S::zero(); shape.len()],
        }
    }

    pub fn full(shape: Shape, value: S) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<S>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::config(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// A `(1, len, 1, 1, 1)` tensor holding `values`.
    pub fn vector(values: &[S]) -> Self {
        Tensor {
            shape: Shape::vector(values.len()),
            data: values.to_vec(),
        }
    }

    /// A `(1, 1, len, 1, 1)` tensor: one sequence along T.
    pub fn sequence(values: &[S]) -> Self {
        Tensor {
            shape: Shape::new(1, 1, values.len(), 1, 1),
            data: values.to_vec(),
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> S) -> Self {
        Tensor {
            shape,
            data: (0..shape.len()).map(&mut f).collect(),
        }
    }

    pub fn random_normal<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            S::of(z * std)
        })
    }

    pub fn random_uniform<R: Rng + ?Sized>(shape: Shape, bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| S::of(rng.random_range(-bound..=bound)))
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> S {
        self.data[self.shape.offset(n, c, t, h, w)]
    }

    pub fn reshaped(mut self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::config(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: S) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fill(&mut self, value: S) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Tensor<S>) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| T::of(v.as_f64())).collect(),
        }
    }
}
