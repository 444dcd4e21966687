//! Parameter matching: moves a source model inside its equivalence class
//! as close as possible (in L2) to an anchor model.
//!
//! Per layer, the FFN permutation is a maximum-weight linear assignment
//! on the unit similarity matrix `W_i1 W_i2^T + b_i1^T b_i2 + W_o1^T W_o2`.
//! Per head, the Q/K and V/O rotations are orthogonal Procrustes
//! solutions `R = U V^T` of the SVD of the cross-correlation matrix; the
//! anchor side is fixed to the identity. Rescaling runs after rotation and
//! picks the stationary point of the scalar objective (a quartic in `a`)
//! with the smallest objective, `a = 1` always being a candidate.
//!
//! The source model's function is unchanged by construction since only
//! symmetry transforms are applied.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::param_distance;
use crate::error::{Error, Result};
use crate::model::{AttentionHeadParams, Block, FfnParams, TransformerModel};
use crate::numerics::{hungarian_max, real_roots_quartic, svd, Matrix, Permutation};
use crate::symmetry::{apply_ffn_permutation, rescale_head, rotate_head, HeadTransform, LayerTransform, SymmetryTransform};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub enable_ffn: bool,
    pub enable_attn: bool,
    pub enable_rescale: bool,
    /// Layers to match; `None` matches every layer. Unselected layers keep
    /// both their FFN and attention parameters.
    pub layer_subset: Option<Vec<usize>>,
    /// Not serialised: results never depend on it.
    #[serde(skip_serializing, default = "one")]
    pub parallel_degree: usize,
}

fn one() -> usize {
    1
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self { enable_ffn: true, enable_attn: true, enable_rescale: true, layer_subset: None, parallel_degree: 1 }
    }
}

impl MatchOptions {
    pub fn disabled() -> Self {
        Self { enable_ffn: false, enable_attn: false, enable_rescale: false, ..Self::default() }
    }

    /// Indices of the last `k` of `n_layers` layers.
    pub fn tail_layers(k: usize, n_layers: usize) -> Vec<usize> {
        (n_layers.saturating_sub(k)..n_layers).collect()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.parallel_degree == 0 {
            return Err(Error::Input("parallel degree must be at least 1".into()));
        }
        if let Some(subset) = &self.layer_subset {
            if let Some(l) = subset.iter().find(|&&l| l >= n_layers) {
                return Err(Error::Input(format!("layer index {l} out of range for {n_layers} layers")));
            }
        }
        Ok(())
    }

    fn selected(&self, n_layers: usize) -> Vec<bool> {
        match &self.layer_subset {
            None => vec![true; n_layers],
            Some(subset) => {
                let set: BTreeSet<usize> = subset.iter().copied().collect();
                (0..n_layers).map(|l| set.contains(&l)).collect()
            }
        }
    }
}

/// Objective values of one layer before and after each matching stage.
///
/// Attention values are `sum over heads` of the Q/K plus V/O squared
/// distances; the rescaling stage starts from the rotated parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerObjectives {
    pub layer: usize,
    pub matched: bool,
    pub ffn_before: f64,
    pub ffn_after: f64,
    pub attn_before: f64,
    pub attn_after: f64,
    pub rescale_before: f64,
    pub rescale_after: f64,
    /// Heads whose rescaling fell back to `a = 1` because the optimality
    /// polynomial was degenerate.
    pub rescale_fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub options: MatchOptions,
    /// Transform that maps the source onto the matched model.
    pub transform: SymmetryTransform,
    pub layers: Vec<LayerObjectives>,
    pub distance_before: f64,
    pub distance_after: f64,
    /// Excluded from serialised reports so they stay reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
}

/// `||W_i1 - W_i2||^2 + ||b_i1 - b_i2||^2 + ||W_o1 - W_o2||^2`.
pub fn ffn_objective(src: &FfnParams, anchor: &FfnParams) -> f64 {
    src.w_i.dist_sq(&anchor.w_i) + src.b_i.dist_sq(&anchor.b_i) + src.w_o.dist_sq(&anchor.w_o)
}

/// Squared distance of the query/key parameters of two heads.
pub fn qk_objective(src: &AttentionHeadParams, anchor: &AttentionHeadParams) -> f64 {
    src.w_q.dist_sq(&anchor.w_q) + src.b_q.dist_sq(&anchor.b_q) + src.w_k.dist_sq(&anchor.w_k) + src.b_k.dist_sq(&anchor.b_k)
}

/// Squared distance of the value/output parameters of two heads.
pub fn vo_objective(src: &AttentionHeadParams, anchor: &AttentionHeadParams) -> f64 {
    src.w_v.dist_sq(&anchor.w_v) + src.b_v.dist_sq(&anchor.b_v) + src.w_o.dist_sq(&anchor.w_o)
}

pub fn head_objective(src: &AttentionHeadParams, anchor: &AttentionHeadParams) -> f64 {
    qk_objective(src, anchor) + vo_objective(src, anchor)
}

/// Unit similarity matrix whose assignment maximum is the best FFN permutation.
pub fn ffn_similarity(src: &FfnParams, anchor: &FfnParams) -> Matrix {
    src.w_i
        .matmul_t(&anchor.w_i)
        .add(&src.b_i.t_matmul(&anchor.b_i))
        .add(&src.w_o.t_matmul(&anchor.w_o))
}

fn check_ffn_shapes(src: &FfnParams, anchor: &FfnParams) -> Result<()> {
    let a: Vec<_> = src.tensors().iter().map(|(_, m)| m.shape()).collect();
    let b: Vec<_> = anchor.tensors().iter().map(|(_, m)| m.shape()).collect();
    if a != b {
        return Err(Error::Dimension(format!("FFN shapes differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn check_head_shapes(src: &AttentionHeadParams, anchor: &AttentionHeadParams) -> Result<()> {
    let a: Vec<_> = src.tensors().iter().map(|(_, m)| m.shape()).collect();
    let b: Vec<_> = anchor.tensors().iter().map(|(_, m)| m.shape()).collect();
    if a != b {
        return Err(Error::Dimension(format!("head shapes differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Best permutation of the source FFN's hidden units toward the anchor.
pub fn match_ffn(src: &FfnParams, anchor: &FfnParams) -> Result<(Permutation, FfnParams)> {
    check_ffn_shapes(src, anchor)?;
    let p = hungarian_max(&ffn_similarity(src, anchor))?;
    let matched = apply_ffn_permutation(src, &p)?;
    Ok((p, matched))
}

/// `U V^T` from the SVD of `m`.
fn procrustes(m: &Matrix) -> Result<Matrix> {
    let s = svd(m)?;
    Ok(s.u.matmul_t(&s.v))
}

/// Q/K and V/O cross-correlation matrices of a head pair.
pub fn head_correlations(src: &AttentionHeadParams, anchor: &AttentionHeadParams) -> (Matrix, Matrix) {
    let qk = src
        .w_q
        .matmul_t(&anchor.w_q)
        .add(&src.w_k.matmul_t(&anchor.w_k))
        .add(&src.b_q.t_matmul(&anchor.b_q))
        .add(&src.b_k.t_matmul(&anchor.b_k));
    let vo = src
        .w_v
        .matmul_t(&anchor.w_v)
        .add(&src.w_o.t_matmul(&anchor.w_o))
        .add(&src.b_v.t_matmul(&anchor.b_v));
    (qk, vo)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadRotation {
    pub r_qk: Matrix,
    pub r_vo: Matrix,
    pub head: AttentionHeadParams,
}

/// Closed-form optimal rotations of one source head toward an anchor head.
pub fn match_attention_head(src: &AttentionHeadParams, anchor: &AttentionHeadParams) -> Result<HeadRotation> {
    check_head_shapes(src, anchor)?;
    let (m_qk, m_vo) = head_correlations(src, anchor);
    let r_qk = procrustes(&m_qk)?;
    let r_vo = procrustes(&m_vo)?;
    let head = rotate_head(src, &r_qk, &r_vo);
    Ok(HeadRotation { r_qk, r_vo, head })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadRescale {
    pub a_qk: f64,
    pub a_vo: f64,
    pub head: AttentionHeadParams,
    /// Set when a polynomial was degenerate and `a = 1` was used unexamined.
    pub fallback: bool,
}

/// Scalar objective `sum ||a up - up_anchor||^2 + sum ||down / a - down_anchor||^2`.
fn scale_objective(a: f64, up: &[(&Matrix, &Matrix)], down: &[(&Matrix, &Matrix)]) -> f64 {
    let up_part: f64 = up.iter().map(|(s, t)| s.scaled(a).dist_sq(t)).sum();
    let down_part: f64 = down.iter().map(|(s, t)| s.scaled(1.0 / a).dist_sq(t)).sum();
    up_part + down_part
}

/// Coefficients `[c4, c3, c2, c1, c0]` of the stationarity condition
/// `|up|^2 a^4 - <up, up'> a^3 + <down, down'> a - |down|^2 = 0`.
pub fn rescale_polynomial(up: &[(&Matrix, &Matrix)], down: &[(&Matrix, &Matrix)]) -> [f64; 5] {
    let up_sq: f64 = up.iter().map(|(s, _)| s.frob_norm_sq()).sum();
    let up_dot: f64 = up.iter().map(|(s, t)| s.frob_dot(t)).sum();
    let down_sq: f64 = down.iter().map(|(s, _)| s.frob_norm_sq()).sum();
    let down_dot: f64 = down.iter().map(|(s, t)| s.frob_dot(t)).sum();
    [up_sq, -up_dot, 0.0, down_dot, -down_sq]
}

fn best_scale(up: &[(&Matrix, &Matrix)], down: &[(&Matrix, &Matrix)]) -> (f64, bool) {
    let [c4, c3, c2, c1, c0] = rescale_polynomial(up, down);
    let roots = match real_roots_quartic(c4, c3, c2, c1, c0) {
        Ok(r) => r,
        Err(_) => return (1.0, true),
    };
    let mut best = 1.0;
    let mut best_value = scale_objective(1.0, up, down);
    let mut any_finite = false;
    for a in roots {
        if !a.is_finite() || a == 0.0 {
            continue;
        }
        any_finite = true;
        let v = scale_objective(a, up, down);
        if v < best_value {
            best = a;
            best_value = v;
        }
    }
    // A non-degenerate quartic with no usable root leaves a = 1, which is
    // still the best candidate examined.
    let _ = any_finite;
    (best, false)
}

/// Optimal per-head rescaling of an (already rotated) source head.
pub fn match_rescaling(src: &AttentionHeadParams, anchor: &AttentionHeadParams) -> Result<HeadRescale> {
    check_head_shapes(src, anchor)?;
    let (a_qk, fb_qk) = best_scale(
        &[(&src.w_q, &anchor.w_q), (&src.b_q, &anchor.b_q)],
        &[(&src.w_k, &anchor.w_k), (&src.b_k, &anchor.b_k)],
    );
    let (a_vo, fb_vo) = best_scale(&[(&src.w_v, &anchor.w_v), (&src.b_v, &anchor.b_v)], &[(&src.w_o, &anchor.w_o)]);
    Ok(HeadRescale { a_qk, a_vo, head: rescale_head(src, a_qk, a_vo), fallback: fb_qk || fb_vo })
}

struct LayerOutcome {
    block: Block,
    transform: LayerTransform,
    objectives: LayerObjectives,
}

fn match_layer(layer: usize, src: &Block, anchor: &Block, selected: bool, opts: &MatchOptions) -> Result<LayerOutcome> {
    let d_ff = src.ffn.w_i.rows();
    let mut block = src.clone();
    let mut transform = LayerTransform {
        ffn_perm: Permutation::identity(d_ff),
        heads: src.attn.heads.iter().map(|h| HeadTransform::identity(h.w_q.rows())).collect(),
    };

    let ffn_before = ffn_objective(&src.ffn, &anchor.ffn);
    let mut ffn_after = ffn_before;
    if selected && opts.enable_ffn {
        let (p, ffn) = match_ffn(&src.ffn, &anchor.ffn)?;
        ffn_after = ffn_objective(&ffn, &anchor.ffn);
        block.ffn = ffn;
        transform.ffn_perm = p;
    }

    let (mut attn_before, mut attn_after, mut rescale_before, mut rescale_after) = (0.0, 0.0, 0.0, 0.0);
    let mut fallbacks = 0;
    for (h, (src_h, anchor_h)) in src.attn.heads.iter().zip(&anchor.attn.heads).enumerate() {
        let before = head_objective(src_h, anchor_h);
        attn_before += before;
        let mut head = src_h.clone();
        if selected && opts.enable_attn {
            let rot = match_attention_head(src_h, anchor_h)?;
            transform.heads[h].r_qk = rot.r_qk;
            transform.heads[h].r_vo = rot.r_vo;
            head = rot.head;
        }
        let rotated = head_objective(&head, anchor_h);
        attn_after += rotated;
        rescale_before += rotated;
        if selected && opts.enable_rescale {
            let rs = match_rescaling(&head, anchor_h)?;
            transform.heads[h].a_qk = rs.a_qk;
            transform.heads[h].a_vo = rs.a_vo;
            fallbacks += usize::from(rs.fallback);
            head = rs.head;
        }
        rescale_after += head_objective(&head, anchor_h);
        block.attn.heads[h] = head;
    }

    Ok(LayerOutcome {
        block,
        transform,
        objectives: LayerObjectives {
            layer,
            matched: selected,
            ffn_before,
            ffn_after,
            attn_before,
            attn_after,
            rescale_before,
            rescale_after,
            rescale_fallbacks: fallbacks,
        },
    })
}

/// Matches `src` to `anchor`; the anchor is never modified.
///
/// Layers are independent units. With `parallel_degree > 1` they run on a
/// dedicated thread pool; results do not depend on the degree.
pub fn match_model(src: &TransformerModel, anchor: &TransformerModel, opts: &MatchOptions) -> Result<(TransformerModel, MatchReport)> {
    if src.config != anchor.config {
        return Err(Error::Config("source and anchor have different configurations".into()));
    }
    src.validate()?;
    anchor.validate()?;
    let n_layers = src.config.n_layers;
    opts.validate(n_layers)?;
    let started = Instant::now();
    let selected = opts.selected(n_layers);

    let unit = |l: usize| match_layer(l, &src.blocks[l], &anchor.blocks[l], selected[l], opts);
    let outcomes: Vec<LayerOutcome> = if opts.parallel_degree == 1 {
        (0..n_layers).map(unit).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallel_degree)
            .build()
            .map_err(|e| Error::Input(format!("cannot build thread pool: {e}")))?;
        pool.install(|| (0..n_layers).into_par_iter().map(unit).collect::<Result<_>>())?
    };

    let mut matched = src.clone();
    let mut layers = Vec::with_capacity(n_layers);
    let mut transforms = Vec::with_capacity(n_layers);
    for (l, o) in outcomes.into_iter().enumerate() {
        matched.blocks[l] = o.block;
        transforms.push(o.transform);
        layers.push(o.objectives);
    }
    let report = MatchReport {
        options: opts.clone(),
        transform: SymmetryTransform { layers: transforms },
        layers,
        distance_before: param_distance(src, anchor)?,
        distance_after: param_distance(&matched, anchor)?,
        wall_time: started.elapsed(),
    };
    Ok((matched, report))
}

/// Result of matching several models to one anchor.
#[derive(Clone, Debug)]
pub struct AnchoredMatch {
    /// Matched models in input order; the anchor is returned unchanged.
    pub models: Vec<TransformerModel>,
    /// One report per model; `None` for the anchor.
    pub reports: Vec<Option<MatchReport>>,
}

/// Matches every non-anchor model pairwise to `models[anchor_index]`.
pub fn match_to_anchor(models: &[TransformerModel], anchor_index: usize, opts: &MatchOptions) -> Result<AnchoredMatch> {
    if models.len() < 2 {
        return Err(Error::Input(format!("need at least two models to match, got {}", models.len())));
    }
    let anchor = models
        .get(anchor_index)
        .ok_or_else(|| Error::Input(format!("anchor index {anchor_index} out of range for {} models", models.len())))?;
    let mut out = AnchoredMatch { models: Vec::with_capacity(models.len()), reports: Vec::with_capacity(models.len()) };
    for (i, m) in models.iter().enumerate() {
        if i == anchor_index {
            out.models.push(anchor.clone());
            out.reports.push(None);
        } else {
            let (matched, report) = match_model(m, anchor, opts)?;
            out.models.push(matched);
            out.reports.push(Some(report));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransformerConfig;
    use crate::numerics::random_orthogonal;
    use crate::symmetry::{apply_attention_rotation, apply_model_symmetry};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> TransformerConfig {
        TransformerConfig::new(2, 2, 8, 5, 9, 3, 4).unwrap()
    }

    fn all_perms(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in all_perms(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn ffn_self_match_is_identity() {
        let m = TransformerModel::random(cfg(), 1, 0.5).unwrap();
        let (p, out) = match_ffn(&m.blocks[0].ffn, &m.blocks[0].ffn).unwrap();
        assert!(p.is_identity());
        assert_eq!(out, m.blocks[0].ffn);
        assert_eq!(ffn_objective(&out, &m.blocks[0].ffn), 0.0);
    }

    #[test]
    fn ffn_planted_permutation_recovered() {
        let m = TransformerModel::random(cfg(), 2, 0.5).unwrap();
        let anchor = &m.blocks[1].ffn;
        let q = Permutation::new(vec![4, 2, 0, 1, 3]).unwrap();
        let src = apply_ffn_permutation(anchor, &q).unwrap();
        let (p, out) = match_ffn(&src, anchor).unwrap();
        assert_eq!(p, q.inverse());
        assert!(ffn_objective(&out, anchor) < 1e-20);
    }

    #[test]
    fn ffn_match_beats_every_permutation_at_d_ff_5() {
        let a = TransformerModel::random(cfg(), 3, 0.5).unwrap();
        let b = TransformerModel::random(cfg(), 4, 0.5).unwrap();
        let (src, anchor) = (&a.blocks[0].ffn, &b.blocks[0].ffn);
        let (_, out) = match_ffn(src, anchor).unwrap();
        let got = ffn_objective(&out, anchor);
        assert!(got <= ffn_objective(src, anchor) + 1e-12);
        let best = all_perms(5)
            .into_iter()
            .map(|p| ffn_objective(&apply_ffn_permutation(src, &Permutation::new(p).unwrap()).unwrap(), anchor))
            .fold(f64::INFINITY, f64::min);
        assert!((got - best).abs() < 1e-12, "{got} vs {best}");
    }

    #[test]
    fn attention_self_match_is_identity() {
        let m = TransformerModel::random(cfg(), 5, 0.5).unwrap();
        let head = &m.blocks[0].attn.heads[0];
        let rot = match_attention_head(head, head).unwrap();
        assert!(rot.r_qk.max_abs_diff(&Matrix::identity(4)) < 1e-10);
        assert!(rot.r_vo.max_abs_diff(&Matrix::identity(4)) < 1e-10);
        assert!(rot.head.max_abs_diff(head) < 1e-10);
    }

    #[test]
    fn attention_planted_rotation_recovered() {
        let m = TransformerModel::random(cfg(), 6, 0.5).unwrap();
        let attn = &m.blocks[1].attn;
        let rq: Vec<Matrix> = (0..2).map(|h| random_orthogonal(4, 40 + h).unwrap()).collect();
        let rv: Vec<Matrix> = (0..2).map(|h| random_orthogonal(4, 50 + h).unwrap()).collect();
        let src = apply_attention_rotation(attn, &rq, &rv).unwrap();
        for h in 0..2 {
            let rot = match_attention_head(&src.heads[h], &attn.heads[h]).unwrap();
            assert!(rot.head.max_abs_diff(&attn.heads[h]) < 1e-8);
            assert!(rot.r_qk.max_abs_diff(&rq[h].transpose()) < 1e-8);
            assert!(rot.r_vo.max_abs_diff(&rv[h].transpose()) < 1e-8);
        }
    }

    fn random_head(rng: &mut ChaCha8Rng, d_model: usize, d_head: usize) -> AttentionHeadParams {
        let mut m = |r, c| Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        AttentionHeadParams {
            w_q: m(d_head, d_model),
            b_q: m(1, d_head),
            w_k: m(d_head, d_model),
            b_k: m(1, d_head),
            w_v: m(d_head, d_model),
            b_v: m(1, d_head),
            w_o: m(d_model, d_head),
        }
    }

    /// Brute force over the 2-D orthogonal group: rotations and reflections
    /// on a uniform angle grid.
    fn brute_force_2d(src: &AttentionHeadParams, anchor: &AttentionHeadParams, angles: usize) -> (f64, f64) {
        let mut best_qk = f64::INFINITY;
        let mut best_vo = f64::INFINITY;
        for k in 0..angles {
            let t = 2.0 * std::f64::consts::PI * k as f64 / angles as f64;
            let (c, s) = (t.cos(), t.sin());
            for r in [
                Matrix::from_rows(&[&[c, -s], &[s, c]]).unwrap(),
                Matrix::from_rows(&[&[c, s], &[s, -c]]).unwrap(),
            ] {
                let rotated = rotate_head(src, &r, &r);
                best_qk = best_qk.min(qk_objective(&rotated, anchor));
                best_vo = best_vo.min(vo_objective(&rotated, anchor));
            }
        }
        (best_qk, best_vo)
    }

    #[test]
    fn closed_form_beats_angle_grid_at_d_head_2() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            let src = random_head(&mut rng, 6, 2);
            let anchor = random_head(&mut rng, 6, 2);
            let rot = match_attention_head(&src, &anchor).unwrap();
            let (bq, bv) = brute_force_2d(&src, &anchor, 20_000);
            assert!(qk_objective(&rot.head, &anchor) <= bq + 1e-6);
            assert!(vo_objective(&rot.head, &anchor) <= bv + 1e-6);
        }
    }

    #[test]
    fn rescale_identical_pair_selects_exactly_one() {
        let m = TransformerModel::random(cfg(), 7, 0.5).unwrap();
        let head = &m.blocks[0].attn.heads[1];
        let rs = match_rescaling(head, head).unwrap();
        assert_eq!(rs.a_qk, 1.0);
        assert_eq!(rs.a_vo, 1.0);
        assert!(!rs.fallback);
        // The stationarity condition holds exactly at a = 1.
        let [c4, c3, c2, c1, c0] = rescale_polynomial(
            &[(&head.w_q, &head.w_q), (&head.b_q, &head.b_q)],
            &[(&head.w_k, &head.w_k), (&head.b_k, &head.b_k)],
        );
        assert!((c4 + c3 + c2 + c1 + c0).abs() < 1e-12);
    }

    #[test]
    fn rescale_planted_factor_recovered() {
        let m = TransformerModel::random(cfg(), 8, 0.5).unwrap();
        let anchor = &m.blocks[0].attn.heads[0];
        let src = rescale_head(anchor, 2.0, 1.0);
        let rs = match_rescaling(&src, anchor).unwrap();
        assert!((rs.a_qk - 0.5).abs() < 1e-6);
        assert!((rs.a_vo - 1.0).abs() < 1e-9);
        assert!(rs.head.max_abs_diff(anchor) < 1e-8);
    }

    #[test]
    fn rescale_beats_log_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let src = random_head(&mut rng, 6, 3);
            let anchor = random_head(&mut rng, 6, 3);
            let rs = match_rescaling(&src, &anchor).unwrap();
            let got_qk = qk_objective(&rs.head, &anchor);
            let got_vo = vo_objective(&rs.head, &anchor);
            let mut grid_qk = f64::INFINITY;
            let mut grid_vo = f64::INFINITY;
            for k in 0..5000 {
                let a = 10f64.powf(-1.0 + 2.0 * k as f64 / 4999.0);
                let h = rescale_head(&src, a, a);
                grid_qk = grid_qk.min(qk_objective(&h, &anchor));
                grid_vo = grid_vo.min(vo_objective(&h, &anchor));
            }
            assert!(got_qk <= grid_qk + 1e-6);
            assert!(got_vo <= grid_vo + 1e-6);
            assert!(got_qk <= qk_objective(&src, &anchor) + 1e-12);
        }
    }

    #[test]
    fn zero_head_falls_back_to_unit_scale() {
        let zero = AttentionHeadParams::zeros(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let anchor = random_head(&mut rng, 6, 3);
        let rs = match_rescaling(&zero, &anchor).unwrap();
        assert_eq!((rs.a_qk, rs.a_vo), (1.0, 1.0));
        assert!(rs.fallback);
    }

    #[test]
    fn disabled_options_return_source() {
        let a = TransformerModel::random(cfg(), 9, 0.5).unwrap();
        let b = TransformerModel::random(cfg(), 10, 0.5).unwrap();
        let (m, r) = match_model(&a, &b, &MatchOptions::disabled()).unwrap();
        assert_eq!(m, a);
        assert_eq!(r.distance_before, r.distance_after);
    }

    #[test]
    fn planted_transform_fully_recovered() {
        let anchor = TransformerModel::random(cfg(), 11, 0.5).unwrap();
        let t = SymmetryTransform::random(&anchor.config, 12).unwrap();
        let src = apply_model_symmetry(&anchor, &t).unwrap();
        let (m, r) = match_model(&src, &anchor, &MatchOptions::default()).unwrap();
        assert!(r.distance_after < 1e-6 * r.distance_before, "{} vs {}", r.distance_after, r.distance_before);
        assert!(param_distance(&apply_model_symmetry(&src, &r.transform).unwrap(), &m).unwrap() < 1e-12);
    }

    #[test]
    fn random_pair_monotone_and_equivalent() {
        let a = TransformerModel::random(cfg(), 13, 0.5).unwrap();
        let b = TransformerModel::random(cfg(), 14, 0.5).unwrap();
        let (m, r) = match_model(&a, &b, &MatchOptions::default()).unwrap();
        assert!(r.distance_after <= r.distance_before + 1e-9);
        for lo in &r.layers {
            assert!(lo.ffn_after <= lo.ffn_before + 1e-9);
            assert!(lo.attn_after <= lo.attn_before + 1e-9);
            assert!(lo.rescale_after <= lo.rescale_before + 1e-9);
        }
        let eq = crate::analysis::equivalence_check(&a, &m, 100, 3).unwrap();
        assert!(eq.max_abs_logit_diff < 1e-8);
    }

    #[test]
    fn subset_leaves_other_layers_alone() {
        let a = TransformerModel::random(cfg(), 15, 0.5).unwrap();
        let b = TransformerModel::random(cfg(), 16, 0.5).unwrap();
        let opts = MatchOptions { layer_subset: Some(MatchOptions::tail_layers(1, 2)), ..MatchOptions::default() };
        let (m, r) = match_model(&a, &b, &opts).unwrap();
        assert_eq!(m.blocks[0], a.blocks[0]);
        assert_ne!(m.blocks[1], a.blocks[1]);
        assert!(!r.layers[0].matched && r.layers[1].matched);
        let bad = MatchOptions { layer_subset: Some(vec![2]), ..MatchOptions::default() };
        assert!(matches!(match_model(&a, &b, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn parallel_degree_does_not_change_results() {
        let a = TransformerModel::random(cfg(), 17, 0.5).unwrap();
        let b = TransformerModel::random(cfg(), 18, 0.5).unwrap();
        let (m1, r1) = match_model(&a, &b, &MatchOptions::default()).unwrap();
        let (m3, r3) = match_model(&a, &b, &MatchOptions { parallel_degree: 3, ..MatchOptions::default() }).unwrap();
        assert_eq!(m1, m3);
        assert_eq!(r1.transform, r3.transform);
        assert_eq!(r1.layers, r3.layers);
    }

    #[test]
    fn anchor_strategy() {
        let base = TransformerModel::random(cfg(), 19, 0.5).unwrap();
        let models: Vec<_> = (0..3).map(|_| base.clone()).collect();
        let out = match_to_anchor(&models, 0, &MatchOptions::default()).unwrap();
        for m in &out.models {
            assert!(param_distance(m, &base).unwrap() < 1e-12);
        }
        assert!(out.reports[0].is_none());
        assert!(matches!(match_to_anchor(&models, 3, &MatchOptions::default()), Err(Error::Input(_))));

        let other = TransformerModel::random(cfg(), 20, 0.5).unwrap();
        let pair = vec![other.clone(), base.clone()];
        let out = match_to_anchor(&pair, 1, &MatchOptions::default()).unwrap();
        let (direct, _) = match_model(&other, &base, &MatchOptions::default()).unwrap();
        assert_eq!(out.models[0], direct);
        assert_eq!(out.models[1], base);
    }

    #[test]
    fn config_mismatch_rejected() {
        let a = TransformerModel::random(cfg(), 1, 0.5).unwrap();
        let b = TransformerModel::random(TransformerConfig::new(1, 2, 8, 5, 9, 3, 4).unwrap(), 1, 0.5).unwrap();
        assert!(matches!(match_model(&a, &b, &MatchOptions::default()), Err(Error::Config(_))));
    }
}
