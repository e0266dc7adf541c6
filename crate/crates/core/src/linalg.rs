//! Small dense helpers: semidefinite Cholesky with jitter escalation.
//!
//! Matrices in the hot sampling loops are tiny (`s × s` with `s = 4` by
//! default), so the factorizations here work on row-major slices. The
//! [`DMatrix`] wrappers are used at configuration time.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FactorError {
    #[error("matrix is not square ({rows}×{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (|a[{row},{col}] - a[{col},{row}]| = {gap:e})")]
    NotSymmetric { row: usize, col: usize, gap: f64 },
    #[error("matrix is not positive semidefinite (pivot {pivot} = {value:e})")]
    NotPsd { pivot: usize, value: f64 },
    #[error("matrix contains a non-finite entry")]
    NonFinite,
}

/// Diagonal jitter ladder tried after a plain semidefinite factorization fails.
pub const JITTER_LADDER: [f64; 5] = [1e-14, 1e-13, 1e-12, 1e-11, 1e-10];

/// Lower-triangular `L` with `L Lᵀ = A` for a symmetric PSD `A` (row-major, `dim × dim`).
///
/// Zero pivots (within a relative tolerance) produce zero columns, so exactly
/// singular covariances such as `[[0]]` factor without perturbation.
pub fn cholesky_psd(a: &[f64], dim: usize) -> Result<Vec<f64>, FactorError> {
    let mut l = vec![0.0; dim * dim];
    cholesky_psd_into(a, dim, &mut l)?;
    Ok(l)
}

pub fn cholesky_psd_into(a: &[f64], dim: usize, l: &mut [f64]) -> Result<(), FactorError> {
    debug_assert_eq!(a.len(), dim * dim);
    debug_assert_eq!(l.len(), dim * dim);
    let scale = (0..dim)
        .map(|i| a[i * dim + i].abs())
        .fold(1.0_f64, f64::max);
    if !scale.is_finite() {
        return Err(FactorError::NonFinite);
    }
    let floor = 1e-12 * scale * dim as f64;
    l.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..dim {
        // Rank-deficient inputs leave a pivot that is zero up to cancellation
        // error, which grows with the original diagonal entry.
        let zero_tol = floor.max(1e-9 * dim as f64 * a[k * dim + k].abs());
        let off_tol = (zero_tol * scale).sqrt() * 10.0;
        let mut d = a[k * dim + k];
        for j in 0..k {
            d -= l[k * dim + j] * l[k * dim + j];
        }
        if d > zero_tol {
            let pivot = d.sqrt();
            l[k * dim + k] = pivot;
            for i in (k + 1)..dim {
                let mut r = a[i * dim + k];
                for j in 0..k {
                    r -= l[i * dim + j] * l[k * dim + j];
                }
                l[i * dim + k] = r / pivot;
            }
        } else if d >= -zero_tol {
            // Degenerate direction: the rest of the column must vanish as well.
            for i in (k + 1)..dim {
                let mut r = a[i * dim + k];
                for j in 0..k {
                    r -= l[i * dim + j] * l[k * dim + j];
                }
                if r.abs() > off_tol {
                    return Err(FactorError::NotPsd { pivot: k, value: d });
                }
            }
        } else {
            return Err(FactorError::NotPsd { pivot: k, value: d });
        }
    }
    if l.iter().any(|v| !v.is_finite()) {
        return Err(FactorError::NonFinite);
    }
    Ok(())
}

pub fn check_symmetric(a: &DMatrix<f64>, tol: f64) -> Result<(), FactorError> {
    if a.nrows() != a.ncols() {
        return Err(FactorError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(FactorError::NonFinite);
    }
    let scale = a.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for r in 0..a.nrows() {
        for c in (r + 1)..a.ncols() {
            let gap = (a[(r, c)] - a[(c, r)]).abs();
            if gap > tol * scale {
                return Err(FactorError::NotSymmetric {
                    row: r,
                    col: c,
                    gap,
                });
            }
        }
    }
    Ok(())
}

/// Symmetric PSD factor of `a`, escalating diagonal jitter along [`JITTER_LADDER`]
/// before giving up.
pub fn factor_with_jitter(a: &DMatrix<f64>) -> Result<DMatrix<f64>, FactorError> {
    check_symmetric(a, 1e-10)?;
    let dim = a.nrows();
    // nalgebra is column-major; symmetrize and copy out row-major.
    let mut rows: Vec<f64> = (0..dim * dim)
        .map(|idx| {
            let (r, c) = (idx / dim, idx % dim);
            0.5 * (a[(r, c)] + a[(c, r)])
        })
        .collect();
    let mut first_err = match cholesky_psd(&rows, dim) {
        Ok(l) => return Ok(DMatrix::from_row_slice(dim, dim, &l)),
        Err(e) => e,
    };
    let mut applied = 0.0;
    for jitter in JITTER_LADDER {
        for i in 0..dim {
            rows[i * dim + i] += jitter - applied;
        }
        applied = jitter;
        match cholesky_psd(&rows, dim) {
            Ok(l) => return Ok(DMatrix::from_row_slice(dim, dim, &l)),
            Err(e) => first_err = e,
        }
    }
    Err(first_err)
}

/// Lower-triangular product `out = L v`.
#[inline]
pub fn lower_mul_vec(l: &[f64], dim: usize, v: &[f64], out: &mut [f64]) {
    for i in 0..dim {
        let row = &l[i * dim..i * dim + i + 1];
        out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// Dense row-major product `out = A B` for square `dim × dim` operands.
#[inline]
pub fn mat_mul(a: &[f64], b: &[f64], dim: usize, out: &mut [f64]) {
    for i in 0..dim {
        for j in 0..dim {
            let mut acc = 0.0;
            for k in 0..dim {
                acc += a[i * dim + k] * b[k * dim + j];
            }
            out[i * dim + j] = acc;
        }
    }
}

/// Dense row-major product `out = A Bᵀ`.
#[inline]
pub fn mat_mul_transposed(a: &[f64], b: &[f64], dim: usize, out: &mut [f64]) {
    for i in 0..dim {
        for j in 0..dim {
            let mut acc = 0.0;
            for k in 0..dim {
                acc += a[i * dim + k] * b[j * dim + k];
            }
            out[i * dim + j] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn reconstruct(l: &[f64], dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim * dim];
        mat_mul_transposed(l, l, dim, &mut out);
        out
    }

    #[test]
    fn zero_matrix_factors_to_zero() {
        let l = cholesky_psd(&[0.0], 1).unwrap();
        assert_eq!(l, vec![0.0]);
        let l = cholesky_psd(&[0.0; 9], 3).unwrap();
        assert!(l.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_one_factors_exactly() {
        // v vᵀ with v = (1, 2, 3)
        let v = [1.0, 2.0, 3.0];
        let a: Vec<f64> = (0..9).map(|k| v[k / 3] * v[k % 3]).collect();
        let l = cholesky_psd(&a, 3).unwrap();
        let back = reconstruct(&l, 3);
        for (x, y) in a.iter().zip(&back) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            factor_with_jitter(&a),
            Err(FactorError::NotPsd { .. })
        ));
    }

    #[test]
    fn asymmetric_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            factor_with_jitter(&a),
            Err(FactorError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn tiny_negative_eigenvalue_absorbed_by_jitter() {
        // Gram matrix of collinear vectors perturbed by -1e-13 on one diagonal.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-11]);
        let l = factor_with_jitter(&a).unwrap();
        let back = &l * l.transpose();
        assert_abs_diff_eq!(back[(1, 1)], 1.0, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn gram_matrices_round_trip(entries in prop::collection::vec(-3.0f64..3.0, 12)) {
            // 4×3 factor -> 4×4 Gram matrix of rank ≤ 3.
            let dim = 4;
            let mut a = vec![0.0; 16];
            for i in 0..dim {
                for j in 0..dim {
                    a[i * dim + j] = (0..3).map(|k| entries[i * 3 + k] * entries[j * 3 + k]).sum();
                }
            }
            let l = cholesky_psd(&a, dim).unwrap();
            let back = reconstruct(&l, dim);
            for (x, y) in a.iter().zip(&back) {
                prop_assert!((x - y).abs() < 1e-8);
            }
        }
    }
}
