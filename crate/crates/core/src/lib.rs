//! Parameter-space symmetries of transformers and symmetry-aware model fusion.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense matrices, Jacobi SVD, Hungarian assignment, polynomial roots.
//! * [`model`]: a minimal multi-head transformer classifier with forward pass, loss,
//!   synthetic data, activation capture and finite-difference gradients.
//! * [`symmetry`]: FFN permutations, per-head attention rotations and rescalings.
//! * [`matching`]: aligns a source model to an anchor inside its equivalence class.
//! * [`fusion`]: Simple / Fisher / RegMean merging with optional matching pre-step.
//! * [`analysis`]: parameter distance, loss interpolation and barrier, equivalence checks.
//! * [`persistence`]: bit-exact checkpoint and dataset files, report writers.
//! * [`cli`]: the `symfuse` command-line front end.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod matching;
pub mod model;
pub mod numerics;
pub mod persistence;
pub mod symmetry;

pub use error::{Error, Result};
pub use numerics::{Matrix, Permutation, SvdResult};
