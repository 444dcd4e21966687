//! Small dense linear algebra plus the combinatorial and polynomial solvers
//! used by the matching routines. Everything here is a pure function.

mod assignment;
mod matrix;
mod orthogonal;
mod quartic;
mod solve;
mod svd;

pub use assignment::{hungarian_max, Permutation};
pub use matrix::Matrix;
pub use orthogonal::random_orthogonal;
pub use quartic::{real_roots_polynomial, real_roots_quartic};
pub use solve::solve_spd;
pub use svd::{svd, SvdResult};
