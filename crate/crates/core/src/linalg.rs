//! Dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition number above which a Jacobian is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse through LU with partial pivoting, refused when the 1-norm
/// condition number exceeds [`SINGULAR_CONDITION`].
pub fn checked_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = a
        .clone()
        .lu()
        .try_inverse()
        .ok_or(Error::SingularJacobian {
            condition: f64::INFINITY,
        })?;
    let condition = norm1(a) * norm1(&inv);
    if !condition.is_finite() || condition > SINGULAR_CONDITION {
        return Err(Error::SingularJacobian { condition });
    }
    Ok(inv)
}

/// Solve `a x = b` with the same singularity guard.
pub fn checked_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(checked_inverse(a)? * b)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue and its unit eigenvector of a symmetric matrix.
pub fn min_eigen(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = symmetrize(m).symmetric_eigen();
    let (idx, &val) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty matrix");
    (val, eig.eigenvectors.column(idx).into_owned())
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

/// `a_inv * middle * a_inv^T / n`, symmetrized.
pub fn sandwich(a_inv: &DMatrix<f64>, middle: &DMatrix<f64>, n: f64) -> DMatrix<f64> {
    symmetrize(&(a_inv * middle * a_inv.transpose() / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -4.0]));
        let inv = checked_inverse(&a).unwrap();
        assert_eq!(inv[(0, 0)], 0.5);
        assert_eq!(inv[(1, 1)], -0.25);
    }

    #[test]
    fn rank_one_is_singular() {
        let x = DVector::from_vec(vec![0.3, 0.7]);
        let a = -(&x * x.transpose());
        assert!(matches!(
            checked_inverse(&a),
            Err(Error::SingularJacobian { .. })
        ));
    }

    #[test]
    fn min_eigen_of_known_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (val, vec) = min_eigen(&m);
        assert!((val - 1.0).abs() < 1e-12);
        assert!((vec[0] + vec[1]).abs() < 1e-12);
    }
}
