//! Dense row-major tensors and the small set of kernels the network needs.
//!
//! Images and feature maps are channels-first (`C×H×W`). Data lives behind an
//! `Arc` so cloning a tensor is cheap; mutation goes through copy-on-write.

mod checkpoint;
mod element;
pub(crate) mod kernels;
mod tape;

use std::fmt;
use std::sync::Arc;

use rand::Rng;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use element::Element;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Result, StmError};

pub const MAX_RANK: usize = 5;

#[derive(Clone, PartialEq)]
pub struct Tensor<E = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.len() > MAX_RANK {
        return Err(StmError::dim(format!(
            "rank {} exceeds the maximum of {MAX_RANK}",
            shape.len()
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(StmError::dim(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(StmError::dim(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Builds a tensor from a shape the caller already knows is valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: &[usize], value: E) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self::from_parts(shape.to_vec(), vec![value; len]))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, E::one())
    }

    pub fn scalar(value: E) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self::from_parts(shape.to_vec(), (0..len).map(&mut f).collect()))
    }

    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |i| if i / n == i % n { E::one() } else { E::zero() })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        Self::from_fn(shape, |_| E::of(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<E> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn item(&self) -> E {
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> E {
        debug_assert_eq!(index.len(), self.rank());
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            debug_assert!(i < d);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.len() {
            return Err(StmError::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| F::of(x.as_f64())).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        self.expect_same_shape(other, "zip")?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: E) -> Self {
        self.map(|x| x * s)
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > E::zero() { x } else { E::zero() })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64().powi(2)).sum()
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(StmError::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(StmError::dim(format!(
                "{what}: expected rank {rank}, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        kernels::matmul(self, other, false)
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        kernels::softmax(self, axis)
    }

    pub fn conv2d(&self, weight: &Self, bias: Option<&Self>, stride: usize, pad: usize) -> Result<Self> {
        Ok(kernels::conv2d(self, weight, bias, stride, pad)?.0)
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        kernels::concat(parts, axis)
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        kernels::slice_axis(self, axis, start, len)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        kernels::permute(self, perm)
    }

    pub fn upsample_bilinear(&self, factor: usize) -> Result<Self> {
        kernels::upsample_bilinear(self, factor)
    }
}

impl<E: fmt::Debug> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}
