//! Parameter distance, loss interpolation with barrier, and functional
//! equivalence checks.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SyntheticDataset, TransformerModel};

pub const DEFAULT_POINTS: usize = 25;

fn check_configs(a: &TransformerModel, b: &TransformerModel) -> Result<()> {
    if a.config != b.config {
        return Err(Error::Config("models have different configurations".into()));
    }
    Ok(())
}

/// L2 norm of the difference of the flattened parameter vectors.
pub fn param_distance(a: &TransformerModel, b: &TransformerModel) -> Result<f64> {
    check_configs(a, b)?;
    let sq: f64 = a
        .named_tensors()
        .iter()
        .zip(b.named_tensors())
        .map(|((_, x), (_, y))| x.dist_sq(y))
        .sum();
    Ok(sq.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub alphas: Vec<f64>,
    pub losses: Vec<f64>,
    /// Loss at `alpha = 1`, i.e. model A.
    pub loss_a: f64,
    /// Loss at `alpha = 0`, i.e. model B.
    pub loss_b: f64,
    pub barrier: f64,
}

impl LossCurve {
    /// Builds a curve from raw grid values; the barrier is recomputed.
    pub fn from_points(alphas: Vec<f64>, losses: Vec<f64>) -> Result<Self> {
        if alphas.len() != losses.len() || alphas.len() < 2 {
            return Err(Error::Format(format!("{} alphas and {} losses", alphas.len(), losses.len())));
        }
        if alphas[0] != 0.0 || *alphas.last().unwrap() != 1.0 || alphas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Format("alphas must increase strictly from 0 to 1".into()));
        }
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Value("non-finite loss on curve".into()));
        }
        let loss_b = losses[0];
        let loss_a = *losses.last().unwrap();
        let barrier = alphas
            .iter()
            .zip(&losses)
            .map(|(&a, &l)| l - (loss_b + a * (loss_a - loss_b)))
            .fold(0.0, f64::max);
        Ok(Self { alphas, losses, loss_a, loss_b, barrier })
    }

    /// `alpha,loss` rows with 17 significant digits and a trailing barrier comment.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,loss\n");
        for (a, l) in self.alphas.iter().zip(&self.losses) {
            let _ = writeln!(s, "{a:.16e},{l:.16e}");
        }
        let _ = writeln!(s, "# barrier={:.16e}", self.barrier);
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("alpha,loss") {
            return Err(Error::Format("missing `alpha,loss` header".into()));
        }
        let (mut alphas, mut losses) = (Vec::new(), Vec::new());
        let mut barrier = None;
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# barrier=") {
                barrier = Some(parse_float(rest)?);
                continue;
            }
            let (a, l) = line.split_once(',').ok_or_else(|| Error::Format(format!("malformed row `{line}`")))?;
            alphas.push(parse_float(a)?);
            losses.push(parse_float(l)?);
        }
        let mut curve = Self::from_points(alphas, losses)?;
        if let Some(b) = barrier {
            curve.barrier = b;
        }
        Ok(curve)
    }
}

fn parse_float(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Format(format!("bad number `{s}`")))
}

/// Losses along `theta(alpha) = alpha * theta_A + (1 - alpha) * theta_B`
/// on a uniform grid of `n_points` values of `alpha`.
pub fn interpolate_losses(
    a: &TransformerModel,
    b: &TransformerModel,
    dataset: &SyntheticDataset,
    n_points: usize,
) -> Result<LossCurve> {
    check_configs(a, b)?;
    if n_points < 3 {
        return Err(Error::Input(format!("need at least 3 interpolation points, got {n_points}")));
    }
    dataset.validate(&a.config)?;
    let alphas: Vec<f64> = (0..n_points).map(|k| k as f64 / (n_points - 1) as f64).collect();
    let losses: Vec<f64> = alphas
        .par_iter()
        .map(|&alpha| interpolate_params(a, b, alpha).loss(dataset))
        .collect::<Result<_>>()?;
    LossCurve::from_points(alphas, losses)
}

/// `b + alpha (a - b)`: exact at both endpoints and constant when `a = b`.
pub fn interpolate_params(a: &TransformerModel, b: &TransformerModel, alpha: f64) -> TransformerModel {
    if alpha == 1.0 {
        return a.clone();
    }
    let mut out = b.clone();
    for ((_, dst), (_, src)) in out.named_tensors_mut().into_iter().zip(a.named_tensors()) {
        for (x, y) in dst.data_mut().iter_mut().zip(src.data()) {
            *x += alpha * (y - *x);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub max_abs_logit_diff: f64,
    pub mean_abs_diff: f64,
    pub n_inputs: usize,
}

/// Compares logits of two models on `n_inputs` seeded uniform token sequences.
pub fn equivalence_check(a: &TransformerModel, b: &TransformerModel, n_inputs: usize, seed: u64) -> Result<EquivalenceReport> {
    check_configs(a, b)?;
    if n_inputs == 0 {
        return Err(Error::Input("n_inputs must be at least 1".into()));
    }
    let cfg = &a.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<usize>> =
        (0..n_inputs).map(|_| (0..cfg.seq_len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect()).collect();
    let diffs: Vec<Vec<f64>> = inputs
        .par_iter()
        .map(|t| {
            let (la, lb) = (a.forward(t)?, b.forward(t)?);
            Ok(la.data().iter().zip(lb.data()).map(|(x, y)| (x - y).abs()).collect())
        })
        .collect::<Result<_>>()?;
    let all: Vec<f64> = diffs.into_iter().flatten().collect();
    Ok(EquivalenceReport {
        max_abs_logit_diff: all.iter().copied().fold(0.0, f64::max),
        mean_abs_diff: all.iter().sum::<f64>() / all.len() as f64,
        n_inputs,
    })
}
