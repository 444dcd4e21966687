//! Model merging: simple weighted averaging, diagonal-Fisher weighting and
//! RegMean, each optionally preceded by matching to an anchor model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{match_to_anchor, MatchOptions, MatchReport};
use crate::model::{capture_activations, fd_gradient, ActivationRecord, SyntheticDataset, TransformerModel, FD_STEP};
use crate::numerics::{solve_spd, Matrix};

pub const DEFAULT_FISHER_ITEMS: usize = 16;
pub const DEFAULT_FISHER_EPSILON: f64 = 1e-8;
pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const DEFAULT_GAMMA: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FusionMethod {
    /// Weighted average; uniform when `weights` is `None`.
    Simple { weights: Option<Vec<f64>> },
    /// Diagonal-Fisher weighted average over the first `items` items of
    /// each model's dataset.
    Fisher { items: usize, epsilon: f64 },
    /// Least-squares merge of every linear map from its input Grams.
    /// `ridge` scales `trace(G) / dim`; `gamma` scales off-diagonal Gram entries.
    RegMean { ridge: f64, gamma: f64 },
}

impl FusionMethod {
    pub fn simple() -> Self {
        Self::Simple { weights: None }
    }

    pub fn fisher() -> Self {
        Self::Fisher { items: DEFAULT_FISHER_ITEMS, epsilon: DEFAULT_FISHER_EPSILON }
    }

    pub fn regmean() -> Self {
        Self::RegMean { ridge: DEFAULT_RIDGE, gamma: DEFAULT_GAMMA }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Simple { .. } => "simple",
            Self::Fisher { .. } => "fisher",
            Self::RegMean { .. } => "regmean",
        }
    }

    pub fn needs_data(&self) -> bool {
        !matches!(self, Self::Simple { .. })
    }

    pub fn validate(&self, n_models: usize) -> Result<()> {
        match self {
            Self::Simple { weights: Some(w) } => {
                if w.len() != n_models {
                    return Err(Error::Input(format!("{} weights for {n_models} models", w.len())));
                }
                if w.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Value("non-finite fusion weight".into()));
                }
                let sum: f64 = w.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Input(format!("fusion weights sum to {sum}, expected 1")));
                }
            }
            Self::Simple { weights: None } => {}
            Self::Fisher { items, epsilon } => {
                if *items == 0 {
                    return Err(Error::Input("fisher items must be at least 1".into()));
                }
                if !(*epsilon > 0.0 && epsilon.is_finite()) {
                    return Err(Error::Input(format!("fisher epsilon must be positive, got {epsilon}")));
                }
            }
            Self::RegMean { ridge, gamma } => {
                if !(*ridge >= 0.0 && ridge.is_finite()) {
                    return Err(Error::Input(format!("ridge must be non-negative, got {ridge}")));
                }
                if !(*gamma > 0.0 && *gamma <= 1.0) {
                    return Err(Error::Input(format!("gamma must lie in (0, 1], got {gamma}")));
                }
            }
        }
        Ok(())
    }
}

fn check_models(models: &[TransformerModel]) -> Result<()> {
    let first = models.first().ok_or_else(|| Error::Input("no models to fuse".into()))?;
    if models.iter().any(|m| m.config != first.config) {
        return Err(Error::Config("models have different configurations".into()));
    }
    Ok(())
}

fn check_datasets<'a>(models: &[TransformerModel], datasets: Option<&'a [SyntheticDataset]>) -> Result<&'a [SyntheticDataset]> {
    let datasets = datasets.ok_or_else(|| Error::Input("this fusion method needs one dataset per model".into()))?;
    if datasets.len() != models.len() {
        return Err(Error::Input(format!("{} datasets for {} models", datasets.len(), models.len())));
    }
    for d in datasets {
        d.validate(&models[0].config)?;
    }
    Ok(datasets)
}

pub fn fuse_simple(models: &[TransformerModel], weights: Option<&[f64]>) -> Result<TransformerModel> {
    check_models(models)?;
    let n = models.len();
    let w: Vec<f64> = match weights {
        Some(w) => {
            FusionMethod::Simple { weights: Some(w.to_vec()) }.validate(n)?;
            w.to_vec()
        }
        None => vec![1.0 / n as f64; n],
    };
    let refs: Vec<&TransformerModel> = models.iter().collect();
    TransformerModel::weighted_sum(&refs, &w)
}

/// Per-model diagonal Fisher estimates aligned with the flattened parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherWeights {
    pub per_model: Vec<Vec<f64>>,
    pub epsilon: f64,
}

/// Mean squared finite-difference gradient over the first `items` items.
pub fn diagonal_fisher(model: &TransformerModel, dataset: &SyntheticDataset, items: usize) -> Result<Vec<f64>> {
    if items == 0 || items > dataset.len() {
        return Err(Error::Input(format!("fisher needs 1..={} items, got {items}", dataset.len())));
    }
    let mut acc = vec![0.0; model.config.param_count()];
    for item in &dataset.items[..items] {
        let g = fd_gradient(model, item, FD_STEP)?;
        for (a, x) in acc.iter_mut().zip(g) {
            *a += x * x;
        }
    }
    for a in &mut acc {
        *a /= items as f64;
    }
    Ok(acc)
}

pub fn fisher_weights(models: &[TransformerModel], datasets: &[SyntheticDataset], items: usize, epsilon: f64) -> Result<FisherWeights> {
    let per_model = models.iter().zip(datasets).map(|(m, d)| diagonal_fisher(m, d, items)).collect::<Result<_>>()?;
    Ok(FisherWeights { per_model, epsilon })
}

/// `theta = sum_i F_i theta_i / sum_i F_i` with every `F_i` floored at
/// `epsilon`, so parameters the loss ignores fall back to the plain mean.
pub fn merge_with_fisher(models: &[TransformerModel], fisher: &FisherWeights) -> Result<TransformerModel> {
    check_models(models)?;
    if fisher.per_model.len() != models.len() {
        return Err(Error::Input(format!("{} Fisher vectors for {} models", fisher.per_model.len(), models.len())));
    }
    let n = models[0].config.param_count();
    if fisher.per_model.iter().any(|f| f.len() != n) {
        return Err(Error::Dimension(format!("Fisher vectors must have length {n}")));
    }
    let thetas: Vec<Vec<f64>> = models.iter().map(|m| m.flatten()).collect();
    let merged: Vec<f64> = (0..n)
        .map(|k| {
            let (mut num, mut den) = (0.0, 0.0);
            for (theta, f) in thetas.iter().zip(&fisher.per_model) {
                let w = f[k].max(fisher.epsilon);
                num += w * theta[k];
                den += w;
            }
            num / den
        })
        .collect();
    if merged.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite Fisher-merged parameter".into()));
    }
    models[0].with_flat(&merged)
}

pub fn fuse_fisher(models: &[TransformerModel], datasets: &[SyntheticDataset], items: usize, epsilon: f64) -> Result<TransformerModel> {
    check_models(models)?;
    FusionMethod::Fisher { items, epsilon }.validate(models.len())?;
    let datasets = check_datasets(models, Some(datasets))?;
    let fisher = fisher_weights(models, datasets, items, epsilon)?;
    merge_with_fisher(models, &fisher)
}

/// Off-diagonal entries scaled by `gamma`.
fn shrink_gram(g: &Matrix, gamma: f64) -> Matrix {
    let mut out = g.scaled(gamma);
    for i in 0..g.rows() {
        out.set(i, i, g.get(i, i));
    }
    out
}

/// Solves `(sum G_i + lambda I) W^T = sum G_i W_i^T + lambda mean(W_i)^T`
/// with `lambda = ridge * trace(sum G_i) / dim`.
///
/// The ridge pulls directions no dataset excites toward the plain average.
pub fn regmean_merge(grams: &[Matrix], weights: &[&Matrix], ridge: f64) -> Result<Matrix> {
    let (out_dim, in_dim) = weights[0].shape();
    let mut g_sum = Matrix::zeros(in_dim, in_dim);
    let mut rhs = Matrix::zeros(in_dim, out_dim);
    let mut mean = Matrix::zeros(in_dim, out_dim);
    for (g, w) in grams.iter().zip(weights) {
        g_sum.axpy(1.0, g);
        rhs.axpy(1.0, &g.matmul_t(w));
        mean.axpy(1.0 / weights.len() as f64, &w.transpose());
    }
    let lambda = ridge * g_sum.trace() / in_dim as f64;
    if lambda > 0.0 {
        for i in 0..in_dim {
            g_sum.set(i, i, g_sum.get(i, i) + lambda);
        }
        rhs.axpy(lambda, &mean);
    }
    Ok(solve_spd(&g_sum, &rhs)?.transpose())
}

fn concat_w_o(model: &TransformerModel, layer: usize) -> Matrix {
    let cfg = &model.config;
    let mut w = Matrix::zeros(cfg.d_model, cfg.n_heads * cfg.d_head);
    for (h, head) in model.blocks[layer].attn.heads.iter().enumerate() {
        w.set_col_block(h * cfg.d_head, &head.w_o);
    }
    w
}

pub fn fuse_regmean(models: &[TransformerModel], datasets: &[SyntheticDataset], ridge: f64, gamma: f64) -> Result<TransformerModel> {
    check_models(models)?;
    FusionMethod::RegMean { ridge, gamma }.validate(models.len())?;
    let datasets = check_datasets(models, Some(datasets))?;
    let records: Vec<ActivationRecord> =
        models.par_iter().zip(datasets).map(|(m, d)| capture_activations(m, d)).collect::<Result<_>>()?;
    let cfg = models[0].config;
    let mut merged = fuse_simple(models, None)?;

    for l in 0..cfg.n_layers {
        let pick = |f: &dyn Fn(&crate::model::LayerGrams) -> &Matrix| -> Vec<Matrix> {
            records.iter().map(|r| shrink_gram(f(&r.layers[l]), gamma)).collect()
        };
        let g_attn = pick(&|g| &g.attn_in);
        let g_out = pick(&|g| &g.attn_out);
        let g_ffn_in = pick(&|g| &g.ffn_in);
        let g_hidden = pick(&|g| &g.ffn_hidden);

        for h in 0..cfg.n_heads {
            let heads: Vec<_> = models.iter().map(|m| &m.blocks[l].attn.heads[h]).collect();
            let target = &mut merged.blocks[l].attn.heads[h];
            target.w_q = regmean_merge(&g_attn, &heads.iter().map(|x| &x.w_q).collect::<Vec<_>>(), ridge)?;
            target.w_k = regmean_merge(&g_attn, &heads.iter().map(|x| &x.w_k).collect::<Vec<_>>(), ridge)?;
            target.w_v = regmean_merge(&g_attn, &heads.iter().map(|x| &x.w_v).collect::<Vec<_>>(), ridge)?;
        }
        let w_os: Vec<Matrix> = models.iter().map(|m| concat_w_o(m, l)).collect();
        let w_o = regmean_merge(&g_out, &w_os.iter().collect::<Vec<_>>(), ridge)?;
        for (h, head) in merged.blocks[l].attn.heads.iter_mut().enumerate() {
            head.w_o = w_o.col_block(h * cfg.d_head, cfg.d_head);
        }

        let ffns: Vec<_> = models.iter().map(|m| &m.blocks[l].ffn).collect();
        merged.blocks[l].ffn.w_i = regmean_merge(&g_ffn_in, &ffns.iter().map(|f| &f.w_i).collect::<Vec<_>>(), ridge)?;
        merged.blocks[l].ffn.w_o = regmean_merge(&g_hidden, &ffns.iter().map(|f| &f.w_o).collect::<Vec<_>>(), ridge)?;
    }
    let g_cls: Vec<Matrix> = records.iter().map(|r| shrink_gram(&r.classifier_in, gamma)).collect();
    merged.classifier_w = regmean_merge(&g_cls, &models.iter().map(|m| &m.classifier_w).collect::<Vec<_>>(), ridge)?;
    Ok(merged)
}

/// Optionally matches all models to `models[anchor_index]`, then merges.
/// Returns the merged model and the match reports of non-anchor models.
pub fn fuse(
    models: &[TransformerModel],
    datasets: Option<&[SyntheticDataset]>,
    method: &FusionMethod,
    match_first: bool,
    match_opts: &MatchOptions,
    anchor_index: usize,
) -> Result<(TransformerModel, Vec<MatchReport>)> {
    check_models(models)?;
    method.validate(models.len())?;
    if method.needs_data() {
        check_datasets(models, datasets)?;
    }
    let (aligned, reports) = if match_first {
        let out = match_to_anchor(models, anchor_index, match_opts)?;
        (out.models, out.reports.into_iter().flatten().collect())
    } else {
        (models.to_vec(), Vec::new())
    };
    let merged = match method {
        FusionMethod::Simple { weights } => fuse_simple(&aligned, weights.as_deref())?,
        FusionMethod::Fisher { items, epsilon } => fuse_fisher(&aligned, datasets.unwrap(), *items, *epsilon)?,
        FusionMethod::RegMean { ridge, gamma } => fuse_regmean(&aligned, datasets.unwrap(), *ridge, *gamma)?,
    };
    Ok((merged, reports))
}
