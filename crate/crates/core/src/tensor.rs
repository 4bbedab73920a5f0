//! Dense rank-4 tensor value type.
//!
//! Tensors are immutable after construction; the data buffer is shared via
//! `Arc` so moving values in and out of a tape is cheap.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;

#[derive(Debug, Clone)]
pub struct Tensor<S: Scalar> {
    shape: Shape,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Shape, data: Vec<S>) -> Result<Tensor<S>> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::arg(
                "tensor",
                format!("data length {} does not match shape {shape}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Shape) -> Tensor<S> {
        Tensor {
            shape,
            data: Arc::new(vec![S::ZERO; shape.numel()]),
        }
    }

    pub fn full(shape: Shape, value: S) -> Tensor<S> {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.numel()]),
        }
    }

    pub fn ones(shape: Shape) -> Tensor<S> {
        Tensor::full(shape, S::ONE)
    }

    pub fn scalar(value: S) -> Tensor<S> {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Tensor<S> {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.shape.index(b, c, y, x)]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_value(&self) -> S {
        self.data
            .iter()
            .copied()
            .fold(self.data[0], |a, b| a.maximum(b))
    }

    pub fn min_value(&self) -> S {
        self.data
            .iter()
            .copied()
            .fold(self.data[0], |a, b| a.minimum(b))
    }

    /// Reinterpret the buffer under a different shape with equal element count.
    pub fn reshaped(&self, shape: Shape) -> Result<Tensor<S>> {
        if shape.numel() != self.numel() {
            return Err(Error::shape("reshape", self.shape, shape));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Convert element type, e.g. a trained f32 tensor into f64 for auditing.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|v| T::from_f64(v.to_f64())).collect()),
        }
    }
}

impl<S: Scalar> PartialEq for Tensor<S> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let r = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0]);
        assert!(r.is_err());
    }

    #[test]
    fn zero_dims_rejected() {
        let r = Tensor::<f32>::from_vec(Shape::new(1, 0, 2, 2), vec![]);
        assert!(r.is_err());
    }

    #[test]
    fn indexing_is_row_major_nchw() {
        let t = Tensor::<f64>::from_fn(Shape::new(2, 3, 4, 5), |b, c, y, x| {
            (b * 1000 + c * 100 + y * 10 + x) as f64
        });
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.shape().index(1, 2, 3, 4)], 1234.0);
    }

    #[test]
    fn reshape_shares_data() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 2, 2, 2), (0..8).map(|v| v as f32).collect())
            .unwrap();
        let r = t.reshaped(Shape::new(1, 1, 2, 4)).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(Shape::new(1, 1, 1, 9)).is_err());
    }
}
