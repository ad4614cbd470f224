//! Small dense and banded linear-algebra kernels.
//!
//! The dense Cholesky routines here exist because the covariance plumbing
//! needs two behaviours nalgebra does not expose: a strict factorization that
//! fails on semidefinite input (so a jitter ladder can react), and a tolerant
//! one that accepts exactly rank-deficient PSD matrices (degenerate sampling
//! paths). The banded LU backs the structured-grid solves of the slice model.

use nalgebra::{DMatrix, DVector};

/// Strict lower-triangular Cholesky; `None` unless the matrix is positive
/// definite.
pub fn cholesky_strict(matrix: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    cholesky_impl(matrix, false)
}

/// Cholesky for positive *semi*definite matrices.
///
/// Pivots that are zero (to a relative tolerance) produce a zero column in
/// the factor, so e.g. the zero matrix factors to the zero matrix. Returns
/// `None` if a pivot is genuinely negative.
pub fn cholesky_psd(matrix: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    cholesky_impl(matrix, true)
}

fn cholesky_impl(matrix: &DMatrix<f64>, allow_semidefinite: bool) -> Option<DMatrix<f64>> {
    let n = matrix.nrows();
    assert_eq!(n, matrix.ncols(), "cholesky requires a square matrix");
    let scale = (0..n)
        .map(|i| matrix[(i, i)].abs())
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let zero_tol = scale * 1e-14 * n as f64;

    let mut factor = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut diag = matrix[(j, j)];
        for k in 0..j {
            diag -= factor[(j, k)] * factor[(j, k)];
        }
        if diag > zero_tol {
            let pivot = diag.sqrt();
            factor[(j, j)] = pivot;
            for i in (j + 1)..n {
                let mut value = matrix[(i, j)];
                for k in 0..j {
                    value -= factor[(i, k)] * factor[(j, k)];
                }
                factor[(i, j)] = value / pivot;
            }
        } else if allow_semidefinite && diag > -zero_tol {
            // Zero pivot: column stays zero. Off-diagonal residuals must also
            // vanish for the matrix to be PSD.
            for i in (j + 1)..n {
                let mut value = matrix[(i, j)];
                for k in 0..j {
                    value -= factor[(i, k)] * factor[(j, k)];
                }
                if value.abs() > zero_tol.max(scale * 1e-12) {
                    return None;
                }
            }
        } else {
            return None;
        }
    }
    Some(factor)
}

/// Solve `L x = b` for lower-triangular `L`.
pub fn solve_lower(factor: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = factor.nrows();
    let mut x = b.clone();
    for i in 0..n {
        for k in 0..i {
            let v = x[k];
            x[i] -= factor[(i, k)] * v;
        }
        x[i] /= factor[(i, i)];
    }
    x
}

/// Solve `L^T x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(factor: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = factor.nrows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let v = x[k];
            x[i] -= factor[(k, i)] * v;
        }
        x[i] /= factor[(i, i)];
    }
    x
}

/// Solve `(L L^T) x = b` given the lower factor.
pub fn solve_spd(factor: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    solve_lower_transpose(factor, &solve_lower(factor, b))
}

/// Inverse of `L L^T` computed column-by-column through the factor.
pub fn spd_inverse(factor: &DMatrix<f64>) -> DMatrix<f64> {
    let n = factor.nrows();
    let mut inv = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        inv.set_column(j, &solve_spd(factor, &e));
    }
    // Symmetrize away the last bits of roundoff.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = v;
            inv[(j, i)] = v;
        }
    }
    inv
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(matrix: &DMatrix<f64>) -> Vec<f64> {
    let sym = nalgebra::SymmetricEigen::new(matrix.clone());
    let mut eigs: Vec<f64> = sym.eigenvalues.iter().copied().collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eigs
}

/// Square banded matrix with equal lower and upper bandwidth, stored by
/// diagonals, plus an in-place LU solve without pivoting.
///
/// The grid operators assembled by the slice model are diagonally dominant
/// M-matrices, for which unpivoted elimination is stable. Callers are
/// expected to verify the residual of any solve they depend on.
#[derive(Debug, Clone)]
pub struct BandedMatrix {
    n: usize,
    bandwidth: usize,
    // data[band][row]: band 0..=2*bandwidth maps to diagonal offset
    // (band as isize - bandwidth as isize).
    data: Vec<Vec<f64>>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        BandedMatrix {
            n,
            bandwidth,
            data: vec![vec![0.0; n]; 2 * bandwidth + 1],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn band_of(&self, row: usize, col: usize) -> Option<usize> {
        let offset = col as isize - row as isize;
        if offset.unsigned_abs() > self.bandwidth {
            return None;
        }
        Some((offset + self.bandwidth as isize) as usize)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        match self.band_of(row, col) {
            Some(band) => self.data[band][row],
            None => 0.0,
        }
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        let band = self
            .band_of(row, col)
            .expect("entry outside the stored band");
        self.data[band][row] += value;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let b = self.bandwidth as isize;
        let mut y = vec![0.0; self.n];
        for row in 0..self.n {
            let lo = (row as isize - b).max(0) as usize;
            let hi = ((row as isize + b) as usize).min(self.n - 1);
            let mut acc = 0.0;
            for col in lo..=hi {
                acc += self.get(row, col) * x[col];
            }
            y[row] = acc;
        }
        y
    }

    /// Solve `A x = rhs` by unpivoted banded LU. `None` if a pivot collapses.
    pub fn solve(&self, rhs: &[f64]) -> Option<Vec<f64>> {
        assert_eq!(rhs.len(), self.n);
        let b = self.bandwidth;
        let n = self.n;
        let mut lu = self.clone();
        let mut x = rhs.to_vec();

        for k in 0..n {
            let pivot = lu.get(k, k);
            if pivot == 0.0 || !pivot.is_finite() {
                return None;
            }
            let i_hi = (k + b).min(n - 1);
            for i in (k + 1)..=i_hi {
                let factor = lu.get(i, k) / pivot;
                if factor == 0.0 {
                    continue;
                }
                let j_hi = (k + b).min(n - 1);
                for j in k..=j_hi {
                    let update = factor * lu.get(k, j);
                    if update != 0.0 {
                        let band = lu.band_of(i, j).unwrap();
                        lu.data[band][i] -= update;
                    }
                }
                x[i] -= factor * x[k];
                let band = lu.band_of(i, k).unwrap();
                lu.data[band][i] = 0.0;
            }
        }
        for k in (0..n).rev() {
            let j_hi = (k + b).min(n - 1);
            for j in (k + 1)..=j_hi {
                x[k] -= lu.get(k, j) * x[j];
            }
            let pivot = lu.get(k, k);
            if pivot == 0.0 || !pivot.is_finite() {
                return None;
            }
            x[k] /= pivot;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn strict_cholesky_identity() {
        let eye = DMatrix::identity(3, 3);
        let l = cholesky_strict(&eye).unwrap();
        assert_relative_eq!(l, eye, epsilon = 1e-14);
    }

    #[test]
    fn strict_rejects_zero_matrix() {
        let zero = DMatrix::zeros(2, 2);
        assert!(cholesky_strict(&zero).is_none());
    }

    #[test]
    fn psd_accepts_zero_matrix() {
        let zero = DMatrix::zeros(2, 2);
        let l = cholesky_psd(&zero).unwrap();
        assert_eq!(l, DMatrix::zeros(2, 2));
    }

    #[test]
    fn psd_accepts_rank_deficient() {
        // vv^T has rank 1.
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let m = &v * v.transpose();
        let l = cholesky_psd(&m).unwrap();
        let rebuilt = &l * l.transpose();
        assert_relative_eq!(rebuilt, m, epsilon = 1e-12);
    }

    #[test]
    fn psd_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky_psd(&m).is_none());
    }

    #[test]
    fn spd_solve_roundtrip() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let l = cholesky_strict(&m).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let b = &m * &x;
        let solved = solve_spd(&l, &b);
        assert_relative_eq!(solved, x, epsilon = 1e-10);
        let inv = spd_inverse(&l);
        assert_relative_eq!(&m * inv, DMatrix::identity(3, 3), epsilon = 1e-10);
    }

    #[test]
    fn banded_solve_matches_dense() {
        let n = 12;
        let mut banded = BandedMatrix::zeros(n, 3);
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(3)..(i + 4).min(n) {
                let v = if i == j {
                    10.0 + i as f64
                } else {
                    -1.0 / (1.0 + (i as f64 - j as f64).abs())
                };
                banded.add(i, j, v);
                dense[(i, j)] = v;
            }
        }
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin() + 1.0).collect();
        let x = banded.solve(&rhs).unwrap();
        let dense_x = dense
            .lu()
            .solve(&DVector::from_vec(rhs.clone()))
            .unwrap();
        for i in 0..n {
            assert_relative_eq!(x[i], dense_x[i], epsilon = 1e-10);
        }
        let y = banded.mul_vec(&x);
        for i in 0..n {
            assert_relative_eq!(y[i], rhs[i], epsilon = 1e-10);
        }
    }
}
