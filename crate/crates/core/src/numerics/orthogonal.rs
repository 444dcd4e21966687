use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Seeded random `n x n` orthogonal matrix.
///
/// Orthonormalises the columns of a standard-normal matrix with two passes
/// of modified Gram-Schmidt. Reflections (det = -1) occur with
/// probability one half.
pub fn random_orthogonal(n: usize, seed: u64) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Dimension("orthogonal matrix size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for j in 0..n {
        for _ in 0..2 {
            for k in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let proj = dot(&rest[0], &done[k]);
                for (x, y) in rest[0].iter_mut().zip(&done[k]) {
                    *x -= proj * y;
                }
            }
        }
        let norm = dot(&cols[j], &cols[j]).sqrt();
        cols[j].iter_mut().for_each(|x| *x /= norm);
    }
    let mut m = Matrix::zeros(n, n);
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            m.set(i, j, x);
        }
    }
    Ok(m)
}
