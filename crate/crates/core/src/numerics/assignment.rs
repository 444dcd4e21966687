//! Maximum-weight linear assignment (Hungarian algorithm).

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// A bijection on `0..n`; `map[i]` is the column assigned to row `i`.
///
/// As a matrix, `P[i, map[i]] = 1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    map: Vec<usize>,
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(map: Vec<usize>) -> Result<Self> {
        Permutation::new(map)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.map
    }
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &j in &map {
            if j >= n || seen[j] {
                return Err(Error::Value(format!("not a permutation of 0..{n}: {map:?}")));
            }
            seen[j] = true;
        }
        Ok(Self { map })
    }

    pub fn identity(n: usize) -> Self {
        Self { map: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &j)| i == j)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.map.len()];
        for (i, &j) in self.map.iter().enumerate() {
            inv[j] = i;
        }
        Permutation { map: inv }
    }

    /// Matrix product `self * next`: row `i` goes to `next.map[self.map[i]]`.
    pub fn then(&self, next: &Permutation) -> Permutation {
        assert_eq!(self.len(), next.len(), "permutation size mismatch");
        Permutation { map: self.map.iter().map(|&j| next.map[j]).collect() }
    }

    pub fn to_matrix(&self) -> Matrix {
        let n = self.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &j) in self.map.iter().enumerate() {
            m.set(i, j, 1.0);
        }
        m
    }

    /// `sum_i cost[i, map[i]]`.
    pub fn score(&self, cost: &Matrix) -> f64 {
        self.map.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum()
    }
}

/// Returns the permutation maximising `sum_i cost[i, map[i]]`.
///
/// Among optimal assignments the lexicographically smallest `map` is
/// returned, where optimality of an edge is judged on the dual potentials
/// with a relative tolerance of `1e-12`.
pub fn hungarian_max(cost: &Matrix) -> Result<Permutation> {
    if !cost.is_square() {
        return Err(Error::Dimension(format!("assignment expects a square cost matrix, got {:?}", cost.shape())));
    }
    if !cost.is_finite() {
        return Err(Error::Value("assignment cost has non-finite entries".into()));
    }
    let n = cost.rows();
    if n == 0 {
        return Ok(Permutation::identity(0));
    }

    // Shortest augmenting path on the negated costs (minimisation form).
    let c = |i: usize, j: usize| -cost.get(i, j);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row (1-based) matched to column j
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }

    let scale = cost.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-12 * scale * n as f64;
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| (c(i, j) - u[i + 1] - v[j + 1]).abs() <= tol).collect())
        .collect();
    lexicographic_minimum(&mut row_to_col, &tight);

    Ok(Permutation { map: row_to_col })
}

/// Rewrites a perfect matching on the tight-edge graph into the
/// lexicographically smallest perfect matching of that graph.
fn lexicographic_minimum(row_to_col: &mut [usize], tight: &[Vec<usize>]) {
    let n = row_to_col.len();
    let mut col_to_row = vec![0usize; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    for i in 0..n {
        for &j in &tight[i] {
            if j == row_to_col[i] {
                break;
            }
            let owner = col_to_row[j];
            if owner < i {
                continue;
            }
            // Give j to row i; the previous owner must reach i's old column
            // through an alternating path over rows > i.
            let freed = row_to_col[i];
            let mut visited = vec![false; n];
            visited[i] = true;
            let mut trial_r2c = row_to_col.to_vec();
            let mut trial_c2r = col_to_row.clone();
            trial_r2c[i] = j;
            trial_c2r[j] = i;
            if augment(owner, freed, tight, &mut trial_r2c, &mut trial_c2r, &mut visited, i) {
                row_to_col.copy_from_slice(&trial_r2c);
                col_to_row = trial_c2r;
                break;
            }
        }
    }
}

fn augment(
    row: usize,
    target: usize,
    tight: &[Vec<usize>],
    r2c: &mut [usize],
    c2r: &mut [usize],
    visited: &mut [bool],
    fixed_upto: usize,
) -> bool {
    visited[row] = true;
    for &j in &tight[row] {
        if j == target {
            r2c[row] = j;
            c2r[j] = row;
            return true;
        }
        let next = c2r[j];
        if next <= fixed_upto || visited[next] {
            continue;
        }
        if augment(next, target, tight, r2c, c2r, visited, fixed_upto) {
            r2c[row] = j;
            c2r[j] = row;
            return true;
        }
    }
    false
}
