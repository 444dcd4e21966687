//! Function-preserving reparameterisations of a transformer.
//!
//! * FFN permutation `P`: `W_i -> P^T W_i`, `b_i -> b_i P`, `W_o -> W_o P`.
//! * Per-head rotation: `W_Q -> R_qk^T W_Q`, `b_Q -> b_Q R_qk` (same for K),
//!   `W_V -> R_vo^T W_V`, `b_V -> b_V R_vo`, `W_O -> W_O R_vo`.
//! * Per-head rescaling: `(W_Q, b_Q) * a_qk`, `(W_K, b_K) / a_qk`,
//!   `(W_V, b_V) * a_vo`, `W_O / a_vo`.
//!
//! "Rotation" here is the whole orthogonal group, reflections included.
//! Embeddings, classifier, LayerNorm parameters and output biases are
//! never touched.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionHeadParams, AttentionLayerParams, FfnParams, TransformerConfig, TransformerModel};
use crate::numerics::{random_orthogonal, Matrix, Permutation};

/// Orthogonality tolerance accepted by [`apply_attention_rotation`].
pub const ORTHOGONALITY_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadTransform {
    pub r_qk: Matrix,
    pub r_vo: Matrix,
    pub a_qk: f64,
    pub a_vo: f64,
}

impl HeadTransform {
    pub fn identity(d_head: usize) -> Self {
        Self { r_qk: Matrix::identity(d_head), r_vo: Matrix::identity(d_head), a_qk: 1.0, a_vo: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTransform {
    pub ffn_perm: Permutation,
    pub heads: Vec<HeadTransform>,
}

/// One member of a model's equivalence class, relative to the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryTransform {
    pub layers: Vec<LayerTransform>,
}

impl SymmetryTransform {
    pub fn identity(config: &TransformerConfig) -> Self {
        Self {
            layers: (0..config.n_layers)
                .map(|_| LayerTransform {
                    ffn_perm: Permutation::identity(config.d_ff),
                    heads: (0..config.n_heads).map(|_| HeadTransform::identity(config.d_head)).collect(),
                })
                .collect(),
        }
    }

    /// Uniform permutations, random orthogonal matrices and scalars
    /// log-uniform in `[0.5, 2]`.
    pub fn random(config: &TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = (0.5f64.ln(), 2.0f64.ln());
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut map: Vec<usize> = (0..config.d_ff).collect();
            map.shuffle(&mut rng);
            let mut heads = Vec::with_capacity(config.n_heads);
            for _ in 0..config.n_heads {
                let r_qk = random_orthogonal(config.d_head, rng.next_u64())?;
                let r_vo = random_orthogonal(config.d_head, rng.next_u64())?;
                let a_qk = rng.gen_range(lo..=hi).exp();
                let a_vo = rng.gen_range(lo..=hi).exp();
                heads.push(HeadTransform { r_qk, r_vo, a_qk, a_vo });
            }
            layers.push(LayerTransform { ffn_perm: Permutation::new(map)?, heads });
        }
        Ok(Self { layers })
    }

    pub fn validate(&self, config: &TransformerConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(Error::Dimension(format!(
                "transform has {} layers, model has {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.ffn_perm.len() != config.d_ff {
                return Err(Error::Dimension(format!("layer {l}: permutation over {} units, d_ff is {}", layer.ffn_perm.len(), config.d_ff)));
            }
            if layer.heads.len() != config.n_heads {
                return Err(Error::Dimension(format!("layer {l}: {} head transforms for {} heads", layer.heads.len(), config.n_heads)));
            }
            for (h, head) in layer.heads.iter().enumerate() {
                for r in [&head.r_qk, &head.r_vo] {
                    if r.shape() != (config.d_head, config.d_head) {
                        return Err(Error::Dimension(format!("layer {l} head {h}: rotation shape {:?}", r.shape())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Transform equal to applying `self` and then `next`.
    pub fn then(&self, next: &SymmetryTransform) -> SymmetryTransform {
        SymmetryTransform {
            layers: self
                .layers
                .iter()
                .zip(&next.layers)
                .map(|(a, b)| LayerTransform {
                    ffn_perm: a.ffn_perm.then(&b.ffn_perm),
                    heads: a
                        .heads
                        .iter()
                        .zip(&b.heads)
                        .map(|(x, y)| HeadTransform {
                            r_qk: x.r_qk.matmul(&y.r_qk),
                            r_vo: x.r_vo.matmul(&y.r_vo),
                            a_qk: x.a_qk * y.a_qk,
                            a_vo: x.a_vo * y.a_vo,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn inverse(&self) -> SymmetryTransform {
        SymmetryTransform {
            layers: self
                .layers
                .iter()
                .map(|layer| LayerTransform {
                    ffn_perm: layer.ffn_perm.inverse(),
                    heads: layer
                        .heads
                        .iter()
                        .map(|h| HeadTransform {
                            r_qk: h.r_qk.transpose(),
                            r_vo: h.r_vo.transpose(),
                            a_qk: 1.0 / h.a_qk,
                            a_vo: 1.0 / h.a_vo,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

pub fn apply_ffn_permutation(ffn: &FfnParams, p: &Permutation) -> Result<FfnParams> {
    let d_ff = ffn.w_i.rows();
    if p.len() != d_ff {
        return Err(Error::Dimension(format!("permutation over {} units, FFN has {d_ff}", p.len())));
    }
    // Unit i moves to position map[i].
    let inv = p.inverse();
    Ok(FfnParams {
        w_i: ffn.w_i.gather_rows(inv.as_slice()),
        b_i: ffn.b_i.gather_cols(inv.as_slice()),
        w_o: ffn.w_o.gather_cols(inv.as_slice()),
        b_o: ffn.b_o.clone(),
        ln_gain: ffn.ln_gain.clone(),
        ln_bias: ffn.ln_bias.clone(),
    })
}

/// Rotates one head; `r_qk`, `r_vo` are assumed orthogonal.
pub fn rotate_head(head: &AttentionHeadParams, r_qk: &Matrix, r_vo: &Matrix) -> AttentionHeadParams {
    AttentionHeadParams {
        w_q: r_qk.t_matmul(&head.w_q),
        b_q: head.b_q.matmul(r_qk),
        w_k: r_qk.t_matmul(&head.w_k),
        b_k: head.b_k.matmul(r_qk),
        w_v: r_vo.t_matmul(&head.w_v),
        b_v: head.b_v.matmul(r_vo),
        w_o: head.w_o.matmul(r_vo),
    }
}

/// Rescales one head; scalars are assumed nonzero.
pub fn rescale_head(head: &AttentionHeadParams, a_qk: f64, a_vo: f64) -> AttentionHeadParams {
    AttentionHeadParams {
        w_q: head.w_q.scaled(a_qk),
        b_q: head.b_q.scaled(a_qk),
        w_k: head.w_k.scaled(1.0 / a_qk),
        b_k: head.b_k.scaled(1.0 / a_qk),
        w_v: head.w_v.scaled(a_vo),
        b_v: head.b_v.scaled(a_vo),
        w_o: head.w_o.scaled(1.0 / a_vo),
    }
}

pub fn apply_attention_rotation(attn: &AttentionLayerParams, r_qk: &[Matrix], r_vo: &[Matrix]) -> Result<AttentionLayerParams> {
    let n = attn.heads.len();
    if r_qk.len() != n || r_vo.len() != n {
        return Err(Error::Dimension(format!("{n} heads but {} / {} rotations", r_qk.len(), r_vo.len())));
    }
    let d_head = attn.heads.first().map_or(0, |h| h.w_q.rows());
    for (h, r) in r_qk.iter().chain(r_vo).enumerate() {
        if r.shape() != (d_head, d_head) {
            return Err(Error::Dimension(format!("rotation {h} has shape {:?}, expected {d_head}x{d_head}", r.shape())));
        }
        let res = r.orthogonality_residual();
        if res.is_nan() || res > ORTHOGONALITY_TOL {
            return Err(Error::Validation(format!("rotation {h} is not orthogonal (residual {res:e})")));
        }
    }
    Ok(AttentionLayerParams {
        heads: attn.heads.iter().enumerate().map(|(h, head)| rotate_head(head, &r_qk[h], &r_vo[h])).collect(),
        b_o: attn.b_o.clone(),
        ln_gain: attn.ln_gain.clone(),
        ln_bias: attn.ln_bias.clone(),
    })
}

pub fn apply_rescaling(attn: &AttentionLayerParams, a_qk: &[f64], a_vo: &[f64]) -> Result<AttentionLayerParams> {
    let n = attn.heads.len();
    if a_qk.len() != n || a_vo.len() != n {
        return Err(Error::Dimension(format!("{n} heads but {} / {} scalars", a_qk.len(), a_vo.len())));
    }
    if let Some(bad) = a_qk.iter().chain(a_vo).find(|a| **a == 0.0 || !a.is_finite()) {
        return Err(Error::Validation(format!("rescaling factor must be finite and nonzero, got {bad}")));
    }
    Ok(AttentionLayerParams {
        heads: attn.heads.iter().enumerate().map(|(h, head)| rescale_head(head, a_qk[h], a_vo[h])).collect(),
        b_o: attn.b_o.clone(),
        ln_gain: attn.ln_gain.clone(),
        ln_bias: attn.ln_bias.clone(),
    })
}

/// Applies, per layer, the FFN permutation, then the head rotations, then
/// the head rescalings.
pub fn apply_model_symmetry(model: &TransformerModel, t: &SymmetryTransform) -> Result<TransformerModel> {
    t.validate(&model.config)?;
    let mut out = model.clone();
    for (block, lt) in out.blocks.iter_mut().zip(&t.layers) {
        block.ffn = apply_ffn_permutation(&block.ffn, &lt.ffn_perm)?;
        let r_qk: Vec<Matrix> = lt.heads.iter().map(|h| h.r_qk.clone()).collect();
        let r_vo: Vec<Matrix> = lt.heads.iter().map(|h| h.r_vo.clone()).collect();
        let a_qk: Vec<f64> = lt.heads.iter().map(|h| h.a_qk).collect();
        let a_vo: Vec<f64> = lt.heads.iter().map(|h| h.a_vo).collect();
        block.attn = apply_attention_rotation(&block.attn, &r_qk, &r_vo)?;
        block.attn = apply_rescaling(&block.attn, &a_qk, &a_vo)?;
    }
    Ok(out)
}
