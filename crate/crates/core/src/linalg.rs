//! Small dense linear-algebra helpers.
//!
//! Decompositions run in `f64` through nalgebra regardless of the scalar type
//! used elsewhere; they are only needed when constructing worlds, fitting
//! estimators and building projectors, never in inner loops.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn to_dmatrix<T: Scalar>(t: &Tensor<T>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(t.rows(), t.cols(), t.data().iter().map(|v| v.as_f64()))
}

pub fn from_dmatrix<T: Scalar>(m: &DMatrix<f64>) -> Tensor<T> {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(T::lit(m[(r, c)]));
        }
    }
    Tensor::matrix(m.nrows(), m.ncols(), data).expect("consistent shape")
}

/// Eigenpairs of a symmetric matrix, sorted by decreasing eigenvalue.
/// Eigenvectors are the columns of the returned matrix.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(m.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (vals, vecs)
}

/// Orthogonal projector `D (DᵀD)⁻¹ Dᵀ` onto the column span of `d`.
pub fn projector_onto_columns(d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if d.ncols() == 0 {
        return Ok(DMatrix::zeros(d.nrows(), d.nrows()));
    }
    let gram = d.transpose() * d;
    let (vals, _) = sym_eigen_desc(&gram);
    let scale = vals.first().copied().unwrap_or(0.0).abs().max(1.0);
    if vals.last().copied().unwrap_or(0.0) <= 1e-12 * scale {
        return Err(Error::RankDeficient("projector basis"));
    }
    let chol = gram
        .cholesky()
        .ok_or(Error::RankDeficient("projector basis"))?;
    let inv = chol.inverse();
    Ok(d * inv * d.transpose())
}

/// Orthonormal basis of the column span (thin QR).
pub fn orthonormalize(d: &DMatrix<f64>) -> DMatrix<f64> {
    d.clone().qr().q()
}

/// Random `d×k` matrix with orthonormal columns.
pub fn random_orthonormal(d: usize, k: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    orthonormalize(&g)
}

/// Principal angles (radians, ascending) between the spans of two matrices
/// with orthonormal columns.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let m = a.transpose() * b;
    let svd = m.svd(false, false);
    let mut angles: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|s| s.clamp(-1.0, 1.0).acos())
        .collect();
    angles.sort_by(f64::total_cmp);
    angles
}

pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or(Error::RankDeficient("linear solve"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projector_is_idempotent_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = DMatrix::from_fn(6, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let p = projector_onto_columns(&d).unwrap();
        assert!((&p * &p - &p).norm() < 1e-10);
        assert!((&p - p.transpose()).norm() < 1e-10);
        assert!((p.trace() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn rank_deficient_basis_is_rejected() {
        let d = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(
            projector_onto_columns(&d),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn principal_angles_of_axes() {
        let a = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 0.0]);
        assert!((principal_angles(&a, &b)[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(principal_angles(&a, &a)[0] < 1e-7);
    }

    #[test]
    fn eigen_is_sorted_descending() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0]);
        let (vals, vecs) = sym_eigen_desc(&m);
        assert_eq!(vals, vec![5.0, 3.0, 1.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }
}
