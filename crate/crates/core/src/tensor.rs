//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor with row-major storage.
///
/// Most of the crate works with rank-2 tensors (`[rows, cols]`); a batch of
/// `n` inputs in `R^d` is an `n×d` matrix and a scalar is `[1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {numel} entries, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// A `1×n` row.
    pub fn row(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    /// An `n×1` column.
    pub fn column(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len(), 1],
            data,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    detail: "ragged rows".into(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor (rank-1 tensors count as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::NonScalarOutput {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_slice_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts every entry through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data,
        }
    }

    /// Matrix product `op(self) · op(other)`.
    pub fn matmul_t(&self, trans_self: bool, other: &Self, trans_other: bool) -> Result<Self> {
        let (m, k1) = if trans_self {
            (self.cols(), self.rows())
        } else {
            (self.rows(), self.cols())
        };
        let (k2, n) = if trans_other {
            (other.cols(), other.rows())
        } else {
            (other.rows(), other.cols())
        };
        if k1 != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{m}x{k1} · {k2}x{n}"),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k1,
            n,
            &self.data,
            trans_self,
            &other.data,
            trans_other,
            &mut out,
        );
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_t(false, other, false)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Index of the largest entry in each row (first on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| argmax(self.row_slice(r)))
            .collect()
    }
}

/// Index of the first maximal entry.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    #[test]
    fn transpose_and_matmul_agree() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = a.transpose();
        let g = a.matmul(&b).unwrap();
        assert_eq!(g.data(), &[14.0, 32.0, 32.0, 77.0]);
        let g2 = a.matmul_t(false, &a, true).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn argmax_takes_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        let t = Tensor::matrix(2, 2, vec![0.0, 0.0, -1.0, 2.0]).unwrap();
        assert_eq!(t.argmax_rows(), vec![0, 1]);
    }
}
