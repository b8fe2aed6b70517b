//! Dense row-major tensors and the reverse-mode autodiff tape built on them.
//!
//! [`Tensor`] is a plain value: a shape and a flat buffer. Differentiable
//! computation happens on a [`Tape`], which records every op applied to
//! [`Var`] handles during one forward pass and replays them in reverse on
//! [`Tape::backward`]. Four-dimensional feature maps are always NCHW.

mod float;
mod ops;
mod tape;

pub use float::Float;
pub(crate) use float::{gemm, MatRef};
pub use ops::{concat, concat_channels, ElemKind};
pub(crate) use tape::{Backward, BackwardCtx};
pub use tape::{Grads, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, buffer has {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Builds a tensor from `f64` values, rounding to the target precision.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::c(v)).collect())
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(N, C, H, W)` of a 4-D tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::invalid("dims4", format!("expected NCHW, got {:?}", self.shape))),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::c(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::c(v.as_f64())).collect(),
        }
    }

    /// Element `(n, c, y, x)` of a 4-D tensor.
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let [_, cs, hs, ws] = self.shape[..] else {
            panic!("at4 on tensor of shape {:?}", self.shape);
        };
        self.data[((n * cs + c) * hs + y) * ws + x]
    }

    /// Stacks equally shaped tensors along a new leading axis, or along the
    /// existing leading axis when the parts already carry one of size 1.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        if shape.len() == 4 && shape[0] == 1 {
            shape[0] = parts.len();
        } else {
            shape.insert(0, parts.len());
        }
        Self::new(shape, data)
    }

    /// Copies batch item `n` of a 4-D tensor out as a `1×C×H×W` tensor.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let (bn, c, h, w) = self.dims4()?;
        if n >= bn {
            return Err(Error::invalid("batch_item", format!("index {n} out of {bn}")));
        }
        let sz = c * h * w;
        Self::new([1, c, h, w], self.data[n * sz..(n + 1) * sz].to_vec())
    }
}
