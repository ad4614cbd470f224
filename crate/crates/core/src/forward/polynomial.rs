//! Polynomial curve-fit models: a fine model of order `n` and a coarse model
//! obtained by zeroing the trailing columns of the design matrix.

use nalgebra::DMatrix;
#[cfg(test)]
use nalgebra::DVector;
use thiserror::Error;

use super::{check_input, ForwardModel, ModelRunFailure, ObservationVector, ParameterVector};

#[derive(Debug, Error)]
pub enum PolynomialError {
    #[error("coarse order {p} must satisfy 1 <= p < n = {n}")]
    InvalidCoarsening { p: usize, n: usize },
    #[error("polynomial order must be at least 1")]
    ZeroOrder,
    #[error("need at least one measurement point")]
    NoPoints,
}

/// Design matrix with columns `t, t^2, ..., t^n` (no constant column).
pub fn poly_design_matrix(t: &[f64], n: usize) -> Result<DMatrix<f64>, PolynomialError> {
    if n == 0 {
        return Err(PolynomialError::ZeroOrder);
    }
    if t.is_empty() {
        return Err(PolynomialError::NoPoints);
    }
    let m = t.len();
    let mut design = DMatrix::zeros(m, n);
    for (i, &ti) in t.iter().enumerate() {
        let mut power = ti;
        for col in 0..n {
            design[(i, col)] = power;
            power *= ti;
        }
    }
    Ok(design)
}

/// Coarsen a design matrix by zeroing columns `p+1 ..= n` (the diagonal
/// projection `G = F P` with `P` keeping the first `p` coordinates).
pub fn coarse_projection(design: &DMatrix<f64>, p: usize) -> Result<DMatrix<f64>, PolynomialError> {
    let n = design.ncols();
    if p == 0 || p >= n {
        return Err(PolynomialError::InvalidCoarsening { p, n });
    }
    let mut coarse = design.clone();
    for col in p..n {
        coarse.column_mut(col).fill(0.0);
    }
    Ok(coarse)
}

/// `m` points equally spaced on `[t_min, t_max]`.
pub fn equally_spaced(t_min: f64, t_max: f64, m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![t_min];
    }
    (0..m)
        .map(|i| t_min + (t_max - t_min) * i as f64 / (m - 1) as f64)
        .collect()
}

/// Forward model `y = M k` for a fixed matrix `M`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    matrix: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        LinearModel { matrix }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl ForwardModel for LinearModel {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn evaluate(&self, k: &ParameterVector) -> Result<ObservationVector, ModelRunFailure> {
        check_input(self, k)?;
        Ok(&self.matrix * k)
    }
}

/// Fine/coarse polynomial pair over shared measurement points.
pub fn polynomial_pair(
    t: &[f64],
    n: usize,
    p: usize,
) -> Result<(LinearModel, LinearModel), PolynomialError> {
    let fine = poly_design_matrix(t, n)?;
    let coarse = if p == n {
        fine.clone()
    } else {
        coarse_projection(&fine, p)?
    };
    Ok((LinearModel::new(fine), LinearModel::new(coarse)))
}

/// The diagonal projection matrix `P` with ones on the first `p` diagonal
/// entries.
pub fn projection_matrix(n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i == j && i < p { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn design_matrix_basics() {
        let f = poly_design_matrix(&[0.0, 1.0], 2).unwrap();
        assert_eq!(f, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]));

        let f = poly_design_matrix(&[2.0], 3).unwrap();
        assert_eq!(f, DMatrix::from_row_slice(1, 3, &[2.0, 4.0, 8.0]));
    }

    #[test]
    fn design_matrix_shape_for_default_config() {
        let t = equally_spaced(0.0, 1.0, 30);
        let f = poly_design_matrix(&t, 2).unwrap();
        assert_eq!((f.nrows(), f.ncols()), (30, 2));
        assert_eq!(t[0], 0.0);
        assert_eq!(t[29], 1.0);
    }

    #[test]
    fn projection_zeroes_trailing_columns() {
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let g = coarse_projection(&f, 1).unwrap();
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 3.0, 0.0]));

        let f = poly_design_matrix(&[0.5, 0.7, 0.9], 4).unwrap();
        let g = coarse_projection(&f, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g[(i, j)], f[(i, j)]);
            }
            assert_eq!(g[(i, 3)], 0.0);
        }
    }

    #[test]
    fn projection_rejects_bad_order() {
        let f = poly_design_matrix(&[0.5], 2).unwrap();
        assert!(coarse_projection(&f, 2).is_err());
        assert!(coarse_projection(&f, 0).is_err());
    }

    #[test]
    fn coarse_evaluation_hand_checked() {
        let (fine, coarse) = polynomial_pair(&[0.5], 2, 1).unwrap();
        let k = DVector::from_vec(vec![1.0, 1.0]);
        assert_relative_eq!(coarse.evaluate(&k).unwrap()[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(fine.evaluate(&k).unwrap()[0], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn projection_commutes_with_evaluation() {
        // g(k) = f(P k) exactly, for any k.
        let t = equally_spaced(0.0, 1.0, 12);
        let (fine, coarse) = polynomial_pair(&t, 4, 2).unwrap();
        let proj = projection_matrix(4, 2);
        let ks = [
            DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]),
            DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0]),
            DVector::from_vec(vec![-7.5, 1e3, -2e-4, 9.9]),
        ];
        for k in &ks {
            let via_coarse = coarse.evaluate(k).unwrap();
            let via_projection = fine.evaluate(&(&proj * k)).unwrap();
            assert_relative_eq!(via_coarse, via_projection, epsilon = 1e-12);
        }
    }

    #[test]
    fn evaluate_rejects_bad_input() {
        let (fine, _) = polynomial_pair(&[0.0, 0.5, 1.0], 2, 1).unwrap();
        assert!(matches!(
            fine.evaluate(&DVector::zeros(3)),
            Err(ModelRunFailure::WrongInputDim { .. })
        ));
        assert!(matches!(
            fine.evaluate(&DVector::from_vec(vec![1.0, f64::NAN])),
            Err(ModelRunFailure::NonFiniteParameter { index: 1 })
        ));
    }

    #[test]
    fn evaluate_is_deterministic() {
        let t = equally_spaced(0.0, 1.0, 30);
        let (fine, _) = polynomial_pair(&t, 3, 1).unwrap();
        let k = DVector::from_vec(vec![0.2, 2.0, -1.0]);
        let a = fine.evaluate(&k).unwrap();
        let b = fine.evaluate(&k).unwrap();
        assert_eq!(a, b);
    }
}
