//! Minimal multi-head transformer classifier.
//!
//! Each block is post-norm attention followed by a post-norm ReLU FFN:
//!
//! ```text
//! A = LN(sum_h softmax(Q_h K_h^T / sqrt(d_head)) V_h W_O^h^T + b_O + X)
//! F = LN(relu(A W_i^T + b_i) W_o^T + b_o + A)
//! ```
//!
//! with `Q_h = X W_Q^h^T + b_Q^h` and likewise for K, V. Token embeddings
//! carry no positional signal. The classifier reads the mean over
//! sequence positions of the last block output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Default relative finite-difference step: `h_i = step * (1 + |theta_i|)`.
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub seq_len: usize,
}

impl TransformerConfig {
    /// Config with `d_head = d_model / n_heads`.
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        d_ff: usize,
        vocab_size: usize,
        n_classes: usize,
        seq_len: usize,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!("d_model {d_model} is not divisible by n_heads {n_heads}")));
        }
        let cfg = Self { n_layers, n_heads, d_model, d_head: d_model / n_heads, d_ff, vocab_size, n_classes, seq_len };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("n_classes", self.n_classes),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (d, k, f) = (self.d_model, self.d_head, self.d_ff);
        let head = 3 * (k * d + k) + d * k;
        let attn = self.n_heads * head + 3 * d;
        let ffn = f * d + f + d * f + 3 * d;
        self.vocab_size * d + self.n_layers * (attn + ffn) + self.n_classes * d + self.n_classes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionHeadParams {
    /// `d_head x d_model`
    pub w_q: Matrix,
    /// `1 x d_head`
    pub b_q: Matrix,
    pub w_k: Matrix,
    pub b_k: Matrix,
    pub w_v: Matrix,
    pub b_v: Matrix,
    /// `d_model x d_head`
    pub w_o: Matrix,
}

impl AttentionHeadParams {
    pub fn zeros(d_model: usize, d_head: usize) -> Self {
        Self {
            w_q: Matrix::zeros(d_head, d_model),
            b_q: Matrix::zeros(1, d_head),
            w_k: Matrix::zeros(d_head, d_model),
            b_k: Matrix::zeros(1, d_head),
            w_v: Matrix::zeros(d_head, d_model),
            b_v: Matrix::zeros(1, d_head),
            w_o: Matrix::zeros(d_model, d_head),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 7] {
        [
            ("wq", &self.w_q),
            ("bq", &self.b_q),
            ("wk", &self.w_k),
            ("bk", &self.b_k),
            ("wv", &self.w_v),
            ("bv", &self.b_v),
            ("wo", &self.w_o),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 7] {
        [&mut self.w_q, &mut self.b_q, &mut self.w_k, &mut self.b_k, &mut self.w_v, &mut self.b_v, &mut self.w_o]
    }

    pub fn dist_sq(&self, other: &Self) -> f64 {
        self.tensors().iter().zip(other.tensors().iter()).map(|((_, a), (_, b))| a.dist_sq(b)).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors().iter())
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayerParams {
    pub heads: Vec<AttentionHeadParams>,
    /// Shared output bias, `1 x d_model`.
    pub b_o: Matrix,
    pub ln_gain: Matrix,
    pub ln_bias: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnParams {
    /// `d_ff x d_model`
    pub w_i: Matrix,
    /// `1 x d_ff`
    pub b_i: Matrix,
    /// `d_model x d_ff`
    pub w_o: Matrix,
    pub b_o: Matrix,
    pub ln_gain: Matrix,
    pub ln_bias: Matrix,
}

impl FfnParams {
    pub fn tensors(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("wi", &self.w_i),
            ("bi", &self.b_i),
            ("wo", &self.w_o),
            ("bo", &self.b_o),
            ("ln_gain", &self.ln_gain),
            ("ln_bias", &self.ln_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 6] {
        [&mut self.w_i, &mut self.b_i, &mut self.w_o, &mut self.b_o, &mut self.ln_gain, &mut self.ln_bias]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub attn: AttentionLayerParams,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerModel {
    pub config: TransformerConfig,
    /// `vocab_size x d_model`
    pub embedding: Matrix,
    pub blocks: Vec<Block>,
    /// `n_classes x d_model`
    pub classifier_w: Matrix,
    /// `1 x n_classes`
    pub classifier_b: Matrix,
}

/// Activations recorded during one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Mean-pooled final hidden state, `1 x d_model`.
    pub pooled: Matrix,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Block input, `n x d_model`; input of every Q/K/V projection.
    pub attn_in: Matrix,
    /// Attention probabilities per head, `n x n`.
    pub attn_probs: Vec<Matrix>,
    /// Concatenated head outputs, `n x d_model`; input of `W_O`.
    pub head_concat: Matrix,
    /// Attention sublayer output, `n x d_model`; input of `W_i`.
    pub ffn_in: Matrix,
    /// Post-ReLU hidden units, `n x d_ff`; input of `W_o`.
    pub ffn_hidden: Matrix,
}

impl TransformerModel {
    /// Model with every weight and bias zero and LayerNorm gains one.
    pub fn zeros(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let TransformerConfig { d_model: d, d_head: k, d_ff: f, .. } = config;
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                attn: AttentionLayerParams {
                    heads: (0..config.n_heads).map(|_| AttentionHeadParams::zeros(d, k)).collect(),
                    b_o: Matrix::zeros(1, d),
                    ln_gain: Matrix::filled(1, d, 1.0),
                    ln_bias: Matrix::zeros(1, d),
                },
                ffn: FfnParams {
                    w_i: Matrix::zeros(f, d),
                    b_i: Matrix::zeros(1, f),
                    w_o: Matrix::zeros(d, f),
                    b_o: Matrix::zeros(1, d),
                    ln_gain: Matrix::filled(1, d, 1.0),
                    ln_bias: Matrix::zeros(1, d),
                },
            })
            .collect();
        Ok(Self {
            config,
            embedding: Matrix::zeros(config.vocab_size, d),
            blocks,
            classifier_w: Matrix::zeros(config.n_classes, d),
            classifier_b: Matrix::zeros(1, config.n_classes),
        })
    }

    /// Weights and biases i.i.d. `N(0, scale^2)`, drawn in canonical tensor
    /// order; LayerNorm gains 1 and biases 0.
    pub fn random(config: TransformerConfig, seed: u64, scale: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("initialisation scale must be finite and non-negative, got {scale}")));
        }
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, tensor) in model.named_tensors_mut() {
            if name.ends_with("ln_gain") || name.ends_with("ln_bias") {
                continue;
            }
            for x in tensor.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = scale * z;
            }
        }
        Ok(model)
    }

    /// Copy with i.i.d. `N(0, sigma^2)` noise added to every weight and bias
    /// (LayerNorm parameters untouched), drawn in canonical order.
    pub fn with_noise(&self, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Input(format!("noise level must be finite and non-negative, got {sigma}")));
        }
        let mut model = self.clone();
        if sigma == 0.0 {
            return Ok(model);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, tensor) in model.named_tensors_mut() {
            if name.ends_with("ln_gain") || name.ends_with("ln_bias") {
                continue;
            }
            for x in tensor.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += sigma * z;
            }
        }
        Ok(model)
    }

    /// Checks every tensor shape against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = canonical_shapes(&self.config);
        let actual = self.named_tensors();
        if expected.len() != actual.len() {
            return Err(Error::Dimension(format!(
                "model has {} tensors, config implies {}",
                actual.len(),
                expected.len()
            )));
        }
        for ((name, shape), (got_name, m)) in expected.iter().zip(&actual) {
            if name != got_name || *shape != m.shape() {
                return Err(Error::Dimension(format!(
                    "tensor {got_name} has shape {:?}, expected {name} with {:?}",
                    m.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    /// All tensors in canonical order with their canonical names.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, block) in self.blocks.iter().enumerate() {
            for (h, head) in block.attn.heads.iter().enumerate() {
                for (suffix, m) in head.tensors() {
                    out.push((format!("layer.{l}.attn.head.{h}.{suffix}"), m));
                }
            }
            out.push((format!("layer.{l}.attn.bo"), &block.attn.b_o));
            out.push((format!("layer.{l}.attn.ln_gain"), &block.attn.ln_gain));
            out.push((format!("layer.{l}.attn.ln_bias"), &block.attn.ln_bias));
            for (suffix, m) in block.ffn.tensors() {
                out.push((format!("layer.{l}.ffn.{suffix}"), m));
            }
        }
        out.push(("classifier.w".to_string(), &self.classifier_w));
        out.push(("classifier.b".to_string(), &self.classifier_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (l, block) in self.blocks.iter_mut().enumerate() {
            for (h, head) in block.attn.heads.iter_mut().enumerate() {
                let suffixes = ["wq", "bq", "wk", "bk", "wv", "bv", "wo"];
                for (suffix, m) in suffixes.iter().zip(head.tensors_mut()) {
                    out.push((format!("layer.{l}.attn.head.{h}.{suffix}"), m));
                }
            }
            out.push((format!("layer.{l}.attn.bo"), &mut block.attn.b_o));
            out.push((format!("layer.{l}.attn.ln_gain"), &mut block.attn.ln_gain));
            out.push((format!("layer.{l}.attn.ln_bias"), &mut block.attn.ln_bias));
            let suffixes = ["wi", "bi", "wo", "bo", "ln_gain", "ln_bias"];
            for (suffix, m) in suffixes.iter().zip(block.ffn.tensors_mut()) {
                out.push((format!("layer.{l}.ffn.{suffix}"), m));
            }
        }
        out.push(("classifier.w".to_string(), &mut self.classifier_w));
        out.push(("classifier.b".to_string(), &mut self.classifier_b));
        out
    }

    /// Concatenation of all tensors in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.config.param_count());
        for (_, m) in self.named_tensors() {
            v.extend_from_slice(m.data());
        }
        v
    }

    /// Inverse of [`flatten`](Self::flatten) for this model's layout.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.config.param_count() {
            return Err(Error::Dimension(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.config.param_count()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for (_, m) in out.named_tensors_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    /// Mutable reference to the `index`-th scalar in canonical order.
    pub fn param_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for (_, m) in self.named_tensors_mut() {
            let n = m.data().len();
            if index < n {
                return Some(&mut m.data_mut()[index]);
            }
            index -= n;
        }
        None
    }

    /// Elementwise `sum_i weights[i] * models[i]`.
    pub fn weighted_sum(models: &[&TransformerModel], weights: &[f64]) -> Result<TransformerModel> {
        let first = models.first().ok_or_else(|| Error::Input("no models to combine".into()))?;
        if models.len() != weights.len() {
            return Err(Error::Input(format!("{} models but {} weights", models.len(), weights.len())));
        }
        for m in models {
            if m.config != first.config {
                return Err(Error::Config("models have different configurations".into()));
            }
        }
        let mut out = (*first).clone();
        let sources: Vec<Vec<(String, &Matrix)>> = models.iter().map(|m| m.named_tensors()).collect();
        for (t, (_, dst)) in out.named_tensors_mut().into_iter().enumerate() {
            for (k, x) in dst.data_mut().iter_mut().enumerate() {
                let mut acc = 0.0;
                for (src, &w) in sources.iter().zip(weights) {
                    acc += w * src[t].1.data()[k];
                }
                *x = acc;
            }
        }
        Ok(out)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.config.seq_len {
            return Err(Error::Input(format!(
                "expected {} tokens, got {}",
                self.config.seq_len,
                tokens.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!("token {t} out of range for vocab {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Logits (`1 x n_classes`) for one token sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        Ok(self.run(tokens, None))
    }

    pub fn forward_with_trace(&self, tokens: &[usize]) -> Result<(Matrix, ForwardTrace)> {
        self.check_tokens(tokens)?;
        let mut trace = ForwardTrace { layers: Vec::with_capacity(self.blocks.len()), pooled: Matrix::zeros(0, 0) };
        let logits = self.run(tokens, Some(&mut trace));
        Ok((logits, trace))
    }

    fn run(&self, tokens: &[usize], mut trace: Option<&mut ForwardTrace>) -> Matrix {
        let cfg = &self.config;
        let mut x = self.embedding.gather_rows(tokens);
        let scale = 1.0 / (cfg.d_head as f64).sqrt();
        for block in &self.blocks {
            let attn = &block.attn;
            let mut mixed = Matrix::zeros(cfg.seq_len, cfg.d_model);
            let mut concat = trace.as_ref().map(|_| Matrix::zeros(cfg.seq_len, cfg.d_model));
            let mut probs_all = Vec::new();
            for (h, head) in attn.heads.iter().enumerate() {
                let q = affine(&x, &head.w_q, &head.b_q);
                let k = affine(&x, &head.w_k, &head.b_k);
                let v = affine(&x, &head.w_v, &head.b_v);
                let mut scores = q.matmul_t(&k);
                for i in 0..scores.rows() {
                    softmax_in_place(scores.row_mut(i), scale);
                }
                let out = scores.matmul(&v);
                mixed = mixed.add(&out.matmul_t(&head.w_o));
                if let Some(c) = concat.as_mut() {
                    c.set_col_block(h * cfg.d_head, &out);
                    probs_all.push(scores);
                }
            }
            let attn_out = layer_norm(&add_row(&mixed.add(&x), &attn.b_o), &attn.ln_gain, &attn.ln_bias);

            let ffn = &block.ffn;
            let hidden = affine(&attn_out, &ffn.w_i, &ffn.b_i).map(|z| z.max(0.0));
            let pre = add_row(&hidden.matmul_t(&ffn.w_o), &ffn.b_o).add(&attn_out);
            let out = layer_norm(&pre, &ffn.ln_gain, &ffn.ln_bias);

            if let Some(t) = trace.as_mut() {
                t.layers.push(LayerTrace {
                    attn_in: x.clone(),
                    attn_probs: probs_all,
                    head_concat: concat.take().unwrap(),
                    ffn_in: attn_out.clone(),
                    ffn_hidden: hidden,
                });
            }
            x = out;
        }
        let mut pooled = Matrix::zeros(1, cfg.d_model);
        for i in 0..x.rows() {
            for (p, v) in pooled.data_mut().iter_mut().zip(x.row(i)) {
                *p += v;
            }
        }
        let pooled = pooled.scaled(1.0 / x.rows() as f64);
        let logits = affine(&pooled, &self.classifier_w, &self.classifier_b);
        if let Some(t) = trace {
            t.pooled = pooled;
        }
        logits
    }

    /// Cross-entropy of one item.
    pub fn item_loss(&self, item: &DataItem) -> Result<f64> {
        if item.label >= self.config.n_classes {
            return Err(Error::Input(format!("label {} out of range", item.label)));
        }
        let logits = self.forward(&item.tokens)?;
        Ok(cross_entropy(logits.data(), item.label))
    }

    /// Mean cross-entropy over the dataset, summed left to right.
    pub fn loss(&self, dataset: &SyntheticDataset) -> Result<f64> {
        if dataset.items.is_empty() {
            return Err(Error::Input("empty dataset".into()));
        }
        let losses: Vec<f64> = dataset.items.par_iter().map(|it| self.item_loss(it)).collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Fraction of items whose argmax logit equals the label.
    pub fn accuracy(&self, dataset: &SyntheticDataset) -> Result<f64> {
        if dataset.items.is_empty() {
            return Err(Error::Input("empty dataset".into()));
        }
        let hits: Vec<bool> = dataset
            .items
            .par_iter()
            .map(|it| self.forward(&it.tokens).map(|l| argmax(l.data()) == it.label))
            .collect::<Result<_>>()?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    }
}

fn canonical_shapes(cfg: &TransformerConfig) -> Vec<(String, (usize, usize))> {
    let (d, k, f) = (cfg.d_model, cfg.d_head, cfg.d_ff);
    let mut out = vec![("embedding".to_string(), (cfg.vocab_size, d))];
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            for (s, shape) in [
                ("wq", (k, d)),
                ("bq", (1, k)),
                ("wk", (k, d)),
                ("bk", (1, k)),
                ("wv", (k, d)),
                ("bv", (1, k)),
                ("wo", (d, k)),
            ] {
                out.push((format!("layer.{l}.attn.head.{h}.{s}"), shape));
            }
        }
        for s in ["bo", "ln_gain", "ln_bias"] {
            out.push((format!("layer.{l}.attn.{s}"), (1, d)));
        }
        for (s, shape) in [("wi", (f, d)), ("bi", (1, f)), ("wo", (d, f)), ("bo", (1, d)), ("ln_gain", (1, d)), ("ln_bias", (1, d))] {
            out.push((format!("layer.{l}.ffn.{s}"), shape));
        }
    }
    out.push(("classifier.w".to_string(), (cfg.n_classes, d)));
    out.push(("classifier.b".to_string(), (1, cfg.n_classes)));
    out
}

/// Canonical tensor names and shapes implied by a config.
pub fn canonical_layout(cfg: &TransformerConfig) -> Vec<(String, (usize, usize))> {
    canonical_shapes(cfg)
}

/// `x w^T + b` with `b` broadcast over rows.
pub fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    add_row(&x.matmul_t(w), b)
}

fn add_row(x: &Matrix, b: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (o, bb) in out.row_mut(i).iter_mut().zip(b.data()) {
            *o += bb;
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x * scale - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Row-wise LayerNorm with population variance and [`LAYER_NORM_EPS`].
pub fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> Matrix {
    let mut out = x.clone();
    let d = x.cols() as f64;
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    out
}

/// `-log softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataItem {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub items: Vec<DataItem>,
    pub seed: u64,
}

impl SyntheticDataset {
    /// Uniform random tokens labelled by the teacher's argmax logit.
    pub fn generate(config: &TransformerConfig, teacher: &TransformerModel, n_items: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if teacher.config != *config {
            return Err(Error::Config("teacher config differs from dataset config".into()));
        }
        if n_items == 0 {
            return Err(Error::Input("dataset needs at least one item".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let token_lists: Vec<Vec<usize>> = (0..n_items)
            .map(|_| (0..config.seq_len).map(|_| rng.gen_range(0..config.vocab_size)).collect())
            .collect();
        let items = token_lists
            .into_par_iter()
            .map(|tokens| {
                let logits = teacher.forward(&tokens)?;
                Ok(DataItem { label: argmax(logits.data()), tokens })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items, seed })
    }

    pub fn validate(&self, config: &TransformerConfig) -> Result<()> {
        for (i, it) in self.items.iter().enumerate() {
            if it.tokens.len() != config.seq_len {
                return Err(Error::Input(format!("item {i} has {} tokens, expected {}", it.tokens.len(), config.seq_len)));
            }
            if it.tokens.iter().any(|&t| t >= config.vocab_size) {
                return Err(Error::Input(format!("item {i} has a token outside the vocabulary")));
            }
            if it.label >= config.n_classes {
                return Err(Error::Input(format!("item {i} label {} out of range", it.label)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Accumulated input Gram matrices `X^T X` of every linear map in one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrams {
    /// Shared input of all Q/K/V projections, `d_model x d_model`.
    pub attn_in: Matrix,
    /// Input of the concatenated output projection, `d_model x d_model`.
    pub attn_out: Matrix,
    pub ffn_in: Matrix,
    /// `d_ff x d_ff`
    pub ffn_hidden: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub layers: Vec<LayerGrams>,
    /// Gram of the pooled classifier inputs, one row per item.
    pub classifier_in: Matrix,
    /// Rows accumulated into the per-position Grams.
    pub n_rows: usize,
    pub n_items: usize,
}

impl ActivationRecord {
    fn empty(cfg: &TransformerConfig) -> Self {
        let d = cfg.d_model;
        Self {
            layers: (0..cfg.n_layers)
                .map(|_| LayerGrams {
                    attn_in: Matrix::zeros(d, d),
                    attn_out: Matrix::zeros(d, d),
                    ffn_in: Matrix::zeros(d, d),
                    ffn_hidden: Matrix::zeros(cfg.d_ff, cfg.d_ff),
                })
                .collect(),
            classifier_in: Matrix::zeros(d, d),
            n_rows: 0,
            n_items: 0,
        }
    }

    fn accumulate(&mut self, other: &ActivationRecord) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.attn_in.axpy(1.0, &b.attn_in);
            a.attn_out.axpy(1.0, &b.attn_out);
            a.ffn_in.axpy(1.0, &b.ffn_in);
            a.ffn_hidden.axpy(1.0, &b.ffn_hidden);
        }
        self.classifier_in.axpy(1.0, &other.classifier_in);
        self.n_rows += other.n_rows;
        self.n_items += other.n_items;
    }
}

/// Input Grams of every linear map, summed over all positions and items.
///
/// Per-item Grams are computed in parallel and reduced in item order.
pub fn capture_activations(model: &TransformerModel, dataset: &SyntheticDataset) -> Result<ActivationRecord> {
    if dataset.items.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let per_item: Vec<ActivationRecord> = dataset
        .items
        .par_iter()
        .map(|it| {
            let (_, trace) = model.forward_with_trace(&it.tokens)?;
            let mut rec = ActivationRecord::empty(&model.config);
            for (g, t) in rec.layers.iter_mut().zip(&trace.layers) {
                g.attn_in = t.attn_in.t_matmul(&t.attn_in);
                g.attn_out = t.head_concat.t_matmul(&t.head_concat);
                g.ffn_in = t.ffn_in.t_matmul(&t.ffn_in);
                g.ffn_hidden = t.ffn_hidden.t_matmul(&t.ffn_hidden);
            }
            rec.classifier_in = trace.pooled.t_matmul(&trace.pooled);
            rec.n_rows = model.config.seq_len;
            rec.n_items = 1;
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    let mut total = ActivationRecord::empty(&model.config);
    for rec in &per_item {
        total.accumulate(rec);
    }
    Ok(total)
}

/// Central-difference gradient of the per-item loss over every parameter
/// in canonical order, with per-coordinate step `step * (1 + |theta_i|)`.
pub fn fd_gradient(model: &TransformerModel, item: &DataItem, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Input(format!("finite-difference step must be positive, got {step}")));
    }
    model.item_loss(item)?;
    let n = model.config.param_count();
    let theta = model.flatten();
    let chunk = 256;
    let parts: Vec<Vec<f64>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|idx| {
            let mut work = model.clone();
            let mut out = Vec::with_capacity(idx.len());
            for &i in idx {
                let h = step * (1.0 + theta[i].abs());
                *work.param_mut(i).unwrap() = theta[i] + h;
                let plus = work.item_loss(item)?;
                *work.param_mut(i).unwrap() = theta[i] - h;
                let minus = work.item_loss(item)?;
                *work.param_mut(i).unwrap() = theta[i];
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss while differentiating parameter {i}")));
                }
                out.push((plus - minus) / (2.0 * h));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}
