//! One-sided (Hestenes) Jacobi SVD for small square matrices.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// `m = u * diag(sigma) * v^T` with orthogonal `u`, `v` and descending
/// non-negative `sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        self.u.matmul(&Matrix::diag(&self.sigma)).matmul_t(&self.v)
    }
}

const MAX_SWEEPS: usize = 80;

/// Singular value decomposition of a square matrix.
///
/// Columns of `u` are sign-fixed so that the largest-magnitude entry of
/// each column is positive (first one wins on exact ties); the matching
/// column of `v` flips with it. Left singular vectors of numerically zero
/// singular values are completed to an orthonormal basis.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("svd expects a square matrix, got {:?}", m.shape())));
    }
    if !m.is_finite() {
        return Err(Error::Value("svd input has non-finite entries".into()));
    }
    let n = m.rows();
    if n == 0 {
        return Ok(SvdResult { u: Matrix::zeros(0, 0), sigma: vec![], v: Matrix::zeros(0, 0) });
    }

    // Work on columns: cols[j] is column j of the evolving A * V.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| m.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the original column order among equal values.
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let smax = norms[order[0]];
    let rank_tol = smax * (n as f64) * f64::EPSILON * 8.0;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &j in &order {
        let s = norms[j];
        if s > rank_tol && s > 0.0 {
            let mut u: Vec<f64> = cols[j].iter().map(|x| x / s).collect();
            // Re-orthogonalise against already accepted columns; the
            // correction is at rounding level for well-separated values.
            orthogonalize(&mut u, &u_cols);
            normalize(&mut u);
            u_cols.push(u);
            sigma.push(s);
        } else {
            u_cols.push(Vec::new());
            sigma.push(0.0);
        }
        v_cols.push(vcols[j].clone());
    }
    complete_basis(&mut u_cols, n);

    for (u, v) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        let mut best = 0;
        for (i, x) in u.iter().enumerate() {
            if x.abs() > u[best].abs() {
                best = i;
            }
        }
        if u[best] < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }

    Ok(SvdResult { u: from_cols(&u_cols, n), sigma, v: from_cols(&v_cols, n) })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

fn orthogonalize(u: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis.iter().filter(|b| !b.is_empty()) {
        let proj = dot(u, b);
        for (x, y) in u.iter_mut().zip(b) {
            *x -= proj * y;
        }
    }
}

fn normalize(u: &mut [f64]) {
    let norm = dot(u, u).sqrt();
    u.iter_mut().for_each(|x| *x /= norm);
}

/// Fills empty slots with unit vectors orthogonal to every other column,
/// trying standard basis vectors in index order.
fn complete_basis(cols: &mut [Vec<f64>], n: usize) {
    let mut candidate = 0;
    for slot in 0..cols.len() {
        if !cols[slot].is_empty() {
            continue;
        }
        loop {
            assert!(candidate < n, "failed to complete orthonormal basis");
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes for stability.
            orthogonalize(&mut e, cols);
            orthogonalize(&mut e, cols);
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                e.iter_mut().for_each(|x| *x /= norm);
                cols[slot] = e;
                break;
            }
        }
    }
}

fn from_cols(cols: &[Vec<f64>], n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            m.set(i, j, x);
        }
    }
    m
}
