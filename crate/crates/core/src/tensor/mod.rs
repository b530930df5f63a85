//! Dense tensors, a define-by-run reverse-mode tape, and Adam.

mod adam;
mod graph;
pub mod kernels;

pub use adam::{AdamConfig, AdamState, LrSchedule};
pub use graph::{AttnShape, Graph, Var};

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Floating-point element type. Training and decoding run in `f32`; `f64`
/// exists for gradient and metric verification.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + Debug
    + Default
    + PartialOrd
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::ZERO; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Build a 2-D tensor from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix whose last axis is the column axis.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::ZERO; m * n];
        kernels::matmul(&self.data, &other.data, m, k, n, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&self) -> Tensor<T> {
        let mut out = self.data.clone();
        let c = self.cols();
        if c > 0 {
            for row in out.chunks_mut(c) {
                kernels::softmax_in_place(row);
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Softmax along an arbitrary axis.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        let mut buf = vec![T::ZERO; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = self.data[base + j * inner];
                }
                kernels::softmax_in_place(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out[base + j * inner] = *b;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn matmul_identity_and_scalar() {
        let i = Tensor::from_rows(&[vec![1.0f32, 0.0], vec![0.0, 1.0]]);
        let b = Tensor::from_rows(&[vec![3.0f32, 4.0], vec![5.0, 6.0]]);
        assert_eq!(i.matmul(&b).unwrap(), b);
        let a = Tensor::from_rows(&[vec![2.0f32]]);
        let c = Tensor::from_rows(&[vec![3.0f32]]);
        assert_eq!(a.matmul(&c).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ta = Tensor::new(vec![4, 5], a.clone()).unwrap();
        let tb = Tensor::new(vec![5, 3], b.clone()).unwrap();
        let c = ta.matmul(&tb).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a[i * 5 + p] * b[p * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::new(vec![3], vec![0.0f32, 0.0, 0.0]).unwrap();
        for v in t.softmax(0).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let t = Tensor::new(vec![3], vec![1000.0f32, 0.0, 0.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1] < 1e-6 && s.all_finite());

        // 64-bit reference for [1, 2, 3]
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let s = t.softmax(0).unwrap();
        for (i, v) in s.data().iter().enumerate() {
            let expect = ((i + 1) as f64).exp() / z;
            assert!((*v as f64 - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let t = Tensor::new(vec![2, 2], vec![0.0f64, 5.0, 0.0, -5.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-12);
        assert!((s.data()[1] + s.data()[3] - 1.0).abs() < 1e-12);
        assert!(t.softmax(2).is_err());
    }

    #[test]
    fn tensor_new_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0f32; 3]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-1000.0f32..1000.0, 1..40)) {
            let t = Tensor::new(vec![v.len()], v).unwrap();
            let s = t.softmax_last();
            let sum: f64 = s.data().iter().map(|x| *x as f64).sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-6);
            proptest::prop_assert!(s.data().iter().all(|x| *x >= 0.0));
        }
    }
}
