use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{from_dmatrix, projector_onto_columns, to_dmatrix};
use crate::scalar::Scalar;
use crate::tensor::{dot, Tensor};

#[derive(Clone, Debug, PartialEq)]
enum Repr<T> {
    Dense(Tensor<T>),
    /// Coordinate mask; `true` entries span the subspace.
    Mask(Vec<bool>),
}

/// Orthogonal projection onto a subspace of `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector<T> {
    repr: Repr<T>,
}

impl<T: Scalar> Projector<T> {
    /// Projector onto the column span of `basis` (`d×k`), which need not be
    /// orthonormal but must have full column rank.
    pub fn from_basis(basis: &Tensor<T>) -> Result<Self> {
        let p = projector_onto_columns(&to_dmatrix(basis))?;
        Ok(Projector {
            repr: Repr::Dense(from_dmatrix(&p)),
        })
    }

    pub fn from_dmatrix_basis(basis: &DMatrix<f64>) -> Result<Self> {
        let p = projector_onto_columns(basis)?;
        Ok(Projector {
            repr: Repr::Dense(from_dmatrix(&p)),
        })
    }

    /// Wraps an explicit matrix after checking the projector invariants.
    pub fn from_matrix(m: Tensor<T>) -> Result<Self> {
        if m.rank() != 2 || m.rows() != m.cols() {
            return Err(Error::ShapeMismatch {
                op: "projector",
                detail: format!("{:?}", m.shape()),
            });
        }
        let p = Projector {
            repr: Repr::Dense(m),
        };
        p.check(T::lit(1e-10))?;
        Ok(p)
    }

    pub fn from_mask(mask: Vec<bool>) -> Self {
        Projector {
            repr: Repr::Mask(mask),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self::from_mask(vec![true; d])
    }

    pub fn zero(d: usize) -> Self {
        Self::from_mask(vec![false; d])
    }

    pub fn dim(&self) -> usize {
        match &self.repr {
            Repr::Dense(m) => m.rows(),
            Repr::Mask(k) => k.len(),
        }
    }

    pub fn trace(&self) -> T {
        match &self.repr {
            Repr::Dense(m) => (0..m.rows()).map(|i| m.get(i, i)).sum(),
            Repr::Mask(k) => T::lit(k.iter().filter(|&&b| b).count() as f64),
        }
    }

    /// Subspace dimension, the rounded trace.
    pub fn rank(&self) -> usize {
        self.trace().as_f64().round().max(0.0) as usize
    }

    pub fn matrix(&self) -> Tensor<T> {
        match &self.repr {
            Repr::Dense(m) => m.clone(),
            Repr::Mask(k) => {
                let d = k.len();
                let mut m = Tensor::zeros(&[d, d]);
                for (i, &on) in k.iter().enumerate() {
                    if on {
                        m.data_mut()[i * d + i] = T::one();
                    }
                }
                m
            }
        }
    }

    pub fn mask(&self) -> Option<&[bool]> {
        match &self.repr {
            Repr::Mask(k) => Some(k),
            Repr::Dense(_) => None,
        }
    }

    /// `P u`
    pub fn apply(&self, u: &[T]) -> Vec<T> {
        assert_eq!(u.len(), self.dim(), "projector dimension");
        match &self.repr {
            Repr::Dense(m) => (0..m.rows()).map(|i| dot(m.row_slice(i), u)).collect(),
            Repr::Mask(k) => u
                .iter()
                .zip(k)
                .map(|(&v, &on)| if on { v } else { T::zero() })
                .collect(),
        }
    }

    /// `P^⊥ u = u − P u`
    pub fn perp(&self, u: &[T]) -> Vec<T> {
        match &self.repr {
            Repr::Dense(_) => u.iter().zip(self.apply(u)).map(|(&a, b)| a - b).collect(),
            Repr::Mask(k) => u
                .iter()
                .zip(k)
                .map(|(&v, &on)| if on { T::zero() } else { v })
                .collect(),
        }
    }

    pub fn complement(&self) -> Self {
        match &self.repr {
            Repr::Dense(m) => {
                let d = m.rows();
                let mut c = m.map(|v| -v);
                for i in 0..d {
                    c.data_mut()[i * d + i] += T::one();
                }
                Projector {
                    repr: Repr::Dense(c),
                }
            }
            Repr::Mask(k) => Projector {
                repr: Repr::Mask(k.iter().map(|b| !b).collect()),
            },
        }
    }

    pub fn cast<U: Scalar>(&self) -> Projector<U> {
        match &self.repr {
            Repr::Dense(m) => Projector {
                repr: Repr::Dense(m.cast()),
            },
            Repr::Mask(k) => Projector {
                repr: Repr::Mask(k.clone()),
            },
        }
    }

    /// Largest deviations from `P² = P` and `Pᵀ = P` (max-norm).
    pub fn invariant_residuals(&self) -> (T, T) {
        let m = self.matrix();
        let sq = m.matmul(&m).expect("square");
        let idem = sq
            .data()
            .iter()
            .zip(m.data())
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max);
        let t = m.transpose();
        let sym = t
            .data()
            .iter()
            .zip(m.data())
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max);
        (idem, sym)
    }

    pub fn check(&self, tol: T) -> Result<()> {
        let (idem, sym) = self.invariant_residuals();
        if idem > tol || sym > tol {
            return Err(Error::InvalidArgument(format!(
                "not an orthogonal projector: idempotence residual {idem}, symmetry residual {sym}"
            )));
        }
        Ok(())
    }
}

/// `‖P − Q‖_F`
pub fn projector_error<T: Scalar>(p: &Projector<T>, q: &Projector<T>) -> Result<T> {
    if p.dim() != q.dim() {
        return Err(Error::ShapeMismatch {
            op: "projector_error",
            detail: format!("{} vs {}", p.dim(), q.dim()),
        });
    }
    let (a, b) = (p.matrix(), q.matrix());
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x - *y) * (*x - *y))
        .sum::<T>()
        .sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e12() -> Projector<f64> {
        Projector::from_basis(&Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap())
            .unwrap()
    }

    #[test]
    fn axis_aligned_projection() {
        let p = e12();
        assert_eq!(p.apply(&[1.0, 1.0, 1.0]), vec![1.0, 1.0, 0.0]);
        assert_eq!(p.perp(&[1.0, 1.0, 1.0]), vec![0.0, 0.0, 1.0]);
        assert_eq!(p.rank(), 2);
        let m = Projector::from_mask(vec![true, true, false]);
        assert_eq!(projector_error(&p, &m).unwrap(), 0.0);
    }

    #[test]
    fn identity_and_zero() {
        let i = Projector::<f64>::identity(4);
        assert_eq!(i.perp(&[1.0, 2.0, 3.0, 4.0]), vec![0.0; 4]);
        assert_eq!(i.complement(), Projector::zero(4));
        assert_eq!(Projector::<f64>::zero(4).apply(&[1.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn complementary_subspaces_have_error_sqrt_2k() {
        let k = 3;
        let mask: Vec<bool> = (0..2 * k).map(|i| i < k).collect();
        let p = Projector::<f64>::from_mask(mask);
        let q = Projector::from_matrix(p.complement().matrix()).unwrap();
        assert!((projector_error(&p, &q).unwrap() - (2.0 * k as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn non_projector_matrix_is_rejected() {
        let m = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(Projector::from_matrix(m).is_err());
    }
}
