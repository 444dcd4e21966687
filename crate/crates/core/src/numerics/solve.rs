use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Solves `a * x = b` for symmetric positive definite `a` by Cholesky.
///
/// Fails with a numeric error when a pivot is not positive relative to
/// the largest diagonal entry, i.e. when `a` is singular to working
/// precision.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.is_square() || a.rows() != b.rows() {
        return Err(Error::Dimension(format!("cannot solve {:?} system with rhs {:?}", a.shape(), b.shape())));
    }
    let n = a.rows();
    let max_diag = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max);
    let tol = max_diag * n as f64 * f64::EPSILON;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d.is_nan() || d <= tol {
            return Err(Error::Numeric(format!("matrix is singular or not positive definite (pivot {d:e} at {j})")));
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    Ok(x)
}
