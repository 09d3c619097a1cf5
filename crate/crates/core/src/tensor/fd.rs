//! Central finite differences, the independent gradient oracle.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Central-difference gradient of a scalar-valued function of one matrix:
/// `(f(x + eps*e) - f(x - eps*e)) / (2*eps)` per entry. Kept free of any
/// tape machinery so it can cross-check `backward`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Matrix) -> Result<f64>,
    theta: &Matrix,
    eps: f64,
) -> Result<Matrix> {
    if !(eps > 0.0) {
        return Err(Error::contract(format!("finite_diff_grad: eps {eps} must be > 0")));
    }
    let (rows, cols) = theta.shape();
    let mut grad = vec![0.0; rows * cols];
    let mut probe = theta.clone();
    for i in 0..rows {
        for j in 0..cols {
            let orig = probe.get(i, j);
            probe.set(i, j, orig + eps);
            let plus = f(&probe)?;
            probe.set(i, j, orig - eps);
            let minus = f(&probe)?;
            probe.set(i, j, orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::numeric(format!(
                    "finite_diff_grad: non-finite evaluation at ({i}, {j})"
                )));
            }
            grad[i * cols + j] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(Matrix::from_raw(rows, cols, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_derivative() {
        let theta = Matrix::from_rows(&[&[3.0]]).unwrap();
        let g = finite_diff_grad(
            |m| Ok(m.data().iter().map(|v| v * v).sum()),
            &theta,
            1e-5,
        )
        .unwrap();
        assert!((g.get(0, 0) - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let theta = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let g = finite_diff_grad(|_| Ok(7.5), &theta, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_positive_eps() {
        let theta = Matrix::from_rows(&[&[1.0]]).unwrap();
        assert!(finite_diff_grad(|m| Ok(m.sum()), &theta, 0.0).is_err());
    }
}
