use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::from_vec", n, data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// `n × n` identity.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Size of the trailing axes flattened together.
    pub fn cols(&self) -> usize {
        if self.shape.is_empty() {
            0
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns an error naming `name` when any entry is NaN or infinite.
    pub fn check_finite(&self, name: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(name.to_string()))
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols() != rhs.rows() {
            return Err(Error::shape(
                "Tensor::matmul",
                format!("lhs cols == rhs rows ({})", rhs.rows()),
                self.cols(),
            ));
        }
        let (r, n) = (self.rows(), rhs.cols());
        let mut out = vec![T::zero(); r * n];
        matmul_into(&self.data, r, self.cols(), &rhs.data, n, &mut out);
        Self::from_vec(&[r, n], out)
    }

    pub fn frobenius_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

/// `out += a · b` for row-major `a: rows × inner`, `b: inner × cols`.
pub fn matmul_into<T: Scalar>(a: &[T], rows: usize, inner: usize, b: &[T], cols: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), rows * inner);
    debug_assert_eq!(b.len(), inner * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        let arow = &a[i * inner..(i + 1) * inner];
        let orow = &mut out[i * cols..(i + 1) * cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[k * cols..(k + 1) * cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `grad_b += aᵀ · grad_out` and `grad_a += grad_out · bᵀ` for `out = a · b`.
///
/// Either accumulator may be skipped by passing `None`.
pub fn matmul_backward<T: Scalar>(
    a: &[T],
    rows: usize,
    inner: usize,
    b: &[T],
    cols: usize,
    grad_out: &[T],
    grad_a: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
) {
    if let Some(gb) = grad_b {
        for i in 0..rows {
            let arow = &a[i * inner..(i + 1) * inner];
            let grow = &grad_out[i * cols..(i + 1) * cols];
            for (k, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let gbrow = &mut gb[k * cols..(k + 1) * cols];
                for (g, &go) in gbrow.iter_mut().zip(grow) {
                    *g += av * go;
                }
            }
        }
    }
    if let Some(ga) = grad_a {
        for i in 0..rows {
            let grow = &grad_out[i * cols..(i + 1) * cols];
            for k in 0..inner {
                let brow = &b[k * cols..(k + 1) * cols];
                let mut acc = T::zero();
                for (&go, &bv) in grow.iter().zip(brow) {
                    acc += go * bv;
                }
                ga[i * inner + k] += acc;
            }
        }
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::from_vec(&[0], vec![]).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        assert!(b.matmul(&b).is_err());
    }

    #[test]
    fn matmul_backward_matches_explicit_sums() {
        let a = [1.0, -2.0, 0.5, 3.0, 1.5, -1.0];
        let b = [2.0, 1.0, 0.0, -1.0, 4.0, 0.25];
        let g = [1.0, 0.5, -2.0, 1.0];
        let mut ga = [0.0; 6];
        let mut gb = [0.0; 6];
        matmul_backward(&a, 2, 3, &b, 2, &g, Some(&mut ga), Some(&mut gb));
        for i in 0..2 {
            for k in 0..3 {
                let want: f64 = (0..2).map(|j| g[i * 2 + j] * b[k * 2 + j]).sum();
                assert_eq!(ga[i * 3 + k], want);
            }
        }
        for k in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..2).map(|i| a[i * 3 + k] * g[i * 2 + j]).sum();
                assert_eq!(gb[k * 2 + j], want);
            }
        }
    }

    #[test]
    fn finite_check_names_tensor() {
        let t = Tensor::from_vec(&[2], vec![1.0, f64::NAN]).unwrap();
        let err = t.check_finite("block.y").unwrap_err();
        assert!(err.to_string().contains("block.y"));
    }
}
