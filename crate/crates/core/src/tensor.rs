//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable value: the element buffer sits behind an
//! `Arc`, so clones and reshapes are cheap and tensors can be shared across
//! threads. All mutation happens by building a new tensor.

use std::fmt;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of the numeric engine. `f32` is the training precision,
/// `f64` exists for gradient verification.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + Send + Sync + std::iter::Sum + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits the element type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::invalid_shape(
                "tensor",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        if expected != data.len() {
            return Err(Error::invalid_shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} elements, buffer has {}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::from_parts(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor::from_parts(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::invalid_shape(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            ))
        }
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    /// New view over the same buffer with a different shape.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        )
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Self>> {
        if axis >= self.rank() || sizes.iter().sum::<usize>() != self.shape[axis] {
            return Err(Error::invalid_shape(
                "split",
                format!(
                    "cannot split {:?} along axis {axis} into {sizes:?}",
                    self.shape
                ),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis];
        let mut start = 0;
        let mut pieces = Vec::with_capacity(sizes.len());
        for &size in sizes {
            let mut buf = Vec::with_capacity(outer * size * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                buf.extend_from_slice(&self.data[base..base + size * inner]);
            }
            let mut shape = self.shape.clone();
            shape[axis] = size;
            pieces.push(Tensor::new(shape, buf)?);
            start += size;
        }
        Ok(pieces)
    }

    /// Largest absolute elementwise difference, or an error on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} elements]", self.shape, self.len())
        }
    }
}
