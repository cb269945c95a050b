use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Gaussian elimination with partial pivoting on a row-major `n x n` system.
/// Overwrites `b` with the solution; returns false on a (numerically) singular matrix.
pub(crate) fn solve_small(a: &mut [f64], b: &mut [f64], n: usize) -> bool {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if a[pivot * n + col].abs() < 1e-300 || !a[pivot * n + col].is_finite() {
            return false;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            if f != 0.0 {
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * b[k];
        }
        b[row] = acc / a[row * n + row];
    }
    b.iter().all(|v| v.is_finite())
}

/// Dense LU solve of `m x = rhs`.
pub(crate) fn solve_dense(m: DMatrix<f64>, rhs: Vec<f64>, what: &'static str) -> Result<Vec<f64>> {
    let rhs = DVector::from_vec(rhs);
    let x = m.lu().solve(&rhs).ok_or(Error::Singular(what))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(what));
    }
    Ok(x.iter().copied().collect())
}
