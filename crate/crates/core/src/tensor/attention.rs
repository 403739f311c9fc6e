//! Transformer encoder layer and sine position embedding.

use super::{layer_norm, linear, relu_inplace, Linear, Precision, Tensor};
use crate::error::{check_dim, Error, Result};

const LAYER_NORM_EPS: f32 = 1e-5;
const PE_TEMPERATURE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub pe_dim: usize,
    pub num_layers: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            num_heads: 8,
            model_dim: 128,
            ffn_dim: 2048,
            pe_dim: 128,
            num_layers: 1,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !self.pe_dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "pe_dim {} must be divisible by 4",
                self.pe_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Parameters of one post-norm encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
}

impl AttentionWeights {
    fn check(&self, cfg: &AttentionConfig) -> Result<()> {
        const OP: &str = "multi_head_self_attention";
        let d = cfg.model_dim;
        for (name, l) in [
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
            ("output", &self.output),
        ] {
            check_dim(OP, name, d, l.in_dim())?;
            check_dim(OP, name, d, l.out_dim())?;
        }
        check_dim(OP, "ffn_in", d, self.ffn_in.in_dim())?;
        check_dim(OP, "ffn_in", cfg.ffn_dim, self.ffn_in.out_dim())?;
        check_dim(OP, "ffn_out", cfg.ffn_dim, self.ffn_out.in_dim())?;
        check_dim(OP, "ffn_out", d, self.ffn_out.out_dim())?;
        check_dim(OP, "norm1", d, self.norm1_gamma.len())?;
        check_dim(OP, "norm2", d, self.norm2_gamma.len())
    }
}

/// Sine/cosine embedding of a normalized BEV position.
///
/// Layout is `[x-block | y-block]`, each block `pe_dim / 2` long with
/// `sin, cos` pairs at frequencies `T^(4i / pe_dim)`.
pub fn sine_position_embedding(xy: (f64, f64), cfg: &AttentionConfig) -> Result<Tensor> {
    if !cfg.pe_dim.is_multiple_of(4) || cfg.pe_dim == 0 {
        return Err(Error::invalid(
            "sine_position_embedding",
            format!("pe_dim {} must be a positive multiple of 4", cfg.pe_dim),
        ));
    }
    let per_axis = cfg.pe_dim / 4;
    let mut out = Vec::with_capacity(cfg.pe_dim);
    for a in [xy.0, xy.1] {
        for i in 0..per_axis {
            let freq = PE_TEMPERATURE.powf(4.0 * i as f64 / cfg.pe_dim as f64);
            out.push((a / freq).sin() as f32);
            out.push((a / freq).cos() as f32);
        }
    }
    Tensor::new(vec![cfg.pe_dim], out)
}

/// Sum whose result does not depend on the order of `terms`.
fn order_free_sum(terms: &mut [f32]) -> f32 {
    terms.sort_unstable_by(f32::total_cmp);
    terms.iter().sum()
}

/// One standard post-norm transformer encoder layer over `[N, model_dim]` tokens.
pub fn multi_head_self_attention(
    tokens: &Tensor,
    cfg: &AttentionConfig,
    weights: &AttentionWeights,
) -> Result<Tensor> {
    multi_head_self_attention_with_weights(tokens, cfg, weights).map(|(out, _)| out)
}

/// Like [`multi_head_self_attention`], also returning each head's `N x N`
/// attention matrix (row = query, column = key).
///
/// Reductions over the token axis are evaluated in a canonical order, so
/// permuting the tokens permutes the output bit for bit.
pub fn multi_head_self_attention_with_weights(
    tokens: &Tensor,
    cfg: &AttentionConfig,
    weights: &AttentionWeights,
) -> Result<(Tensor, Vec<Vec<f32>>)> {
    const OP: &str = "multi_head_self_attention";
    cfg.validate()?;
    let (n, d) = tokens.dims2(OP)?;
    check_dim(OP, "model_dim", cfg.model_dim, d)?;
    if n == 0 {
        return Err(Error::invalid(OP, "at least one token is required"));
    }
    weights.check(cfg)?;
    let precision = tokens.precision();

    let q = linear(tokens, &weights.query.weight, &weights.query.bias)?;
    let k = linear(tokens, &weights.key.weight, &weights.key.bias)?;
    let v = linear(tokens, &weights.value.weight, &weights.value.bias)?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut heads_out = vec![0.0f32; n * d];
    let mut attn_maps = Vec::with_capacity(cfg.num_heads);
    let mut scratch = vec![0.0f32; n];
    for h in 0..cfg.num_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut probs = vec![0.0f32; n * n];
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let row = &mut probs[i * n..(i + 1) * n];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[cols.clone()];
                *s = qi.iter().zip(kj).fold(0.0f32, |acc, (a, b)| acc + a * b) * scale;
            }
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            row.iter_mut().for_each(|s| *s = (*s - max).exp());
            scratch.copy_from_slice(row);
            let denom = order_free_sum(&mut scratch);
            row.iter_mut().for_each(|s| *s /= denom);
        }
        for i in 0..n {
            let p = &probs[i * n..(i + 1) * n];
            for c in cols.clone() {
                for (j, t) in scratch.iter_mut().enumerate() {
                    *t = p[j] * v.row(j)[c];
                }
                heads_out[i * d + c] = precision.round(order_free_sum(&mut scratch));
            }
        }
        attn_maps.push(probs);
    }
    let heads = Tensor::from_parts(vec![n, d], heads_out, precision);
    let attended = linear(&heads, &weights.output.weight, &weights.output.bias)?;
    let x1 = layer_norm(
        &tokens.add(&attended)?,
        &weights.norm1_gamma,
        &weights.norm1_beta,
        LAYER_NORM_EPS,
    )?;
    let mut hidden = linear(&x1, &weights.ffn_in.weight, &weights.ffn_in.bias)?;
    relu_inplace(&mut hidden);
    let ffn = linear(&hidden, &weights.ffn_out.weight, &weights.ffn_out.bias)?;
    let out = layer_norm(
        &x1.add(&ffn)?,
        &weights.norm2_gamma,
        &weights.norm2_beta,
        LAYER_NORM_EPS,
    )?;
    debug_assert!(precision == Precision::Fp32 || out.precision() == Precision::Fp16E);
    Ok((out, attn_maps))
}
