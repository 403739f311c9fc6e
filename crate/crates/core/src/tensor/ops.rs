use super::{round_f16, Precision, Tensor};
use crate::error::{check_dim, Error, Result};

/// Weights of a precision-matching kernel: rounded to binary16 when the input is.
fn kernel_values(weights: &Tensor, precision: Precision) -> Vec<f32> {
    match precision {
        Precision::Fp32 => weights.data().to_vec(),
        Precision::Fp16E => weights.data().iter().map(|&v| round_f16(v)).collect(),
    }
}

/// 2D cross-correlation with zero padding.
///
/// `input` is `[C_in, H, W]`, `weight` is `[C_out, C_in, kh, kw]`, `bias` is `[C_out]`.
/// Products are accumulated in `f32` in `(c_in, ky, kx)` order, the bias is added last,
/// and the result is rounded to the input's precision.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let (c_in, h, w) = input.dims3(OP)?;
    check_dim(OP, "weight rank", 4, weight.rank())?;
    let (c_out, wc_in, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    check_dim(OP, "C_in", c_in, wc_in)?;
    check_dim(OP, "C_out", c_out, bias.len())?;
    if stride == 0 {
        return Err(Error::invalid(OP, "stride must be at least 1"));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(OP, format!("kernel {kh}x{kw} must be odd")));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::invalid(OP, "kernel larger than padded input"));
    }
    let out_h = (h + 2 * padding - kh) / stride + 1;
    let out_w = (w + 2 * padding - kw) / stride + 1;

    let precision = input.precision();
    let wv = kernel_values(weight, precision);
    let bv = kernel_values(bias, precision);
    let x = input.data();
    let mut out = vec![0.0f32; c_out * out_h * out_w];

    // Valid output range along one axis for kernel tap `k`.
    let valid = |k: usize, len: usize, out_len: usize| -> (usize, usize) {
        let lo = padding.saturating_sub(k).div_ceil(stride);
        // Largest o with o*stride + k - padding <= len - 1.
        let hi_num = len - 1 + padding;
        if hi_num < k {
            return (1, 0);
        }
        let hi = ((hi_num - k) / stride).min(out_len.saturating_sub(1));
        (lo, hi)
    };

    for co in 0..c_out {
        let out_plane = &mut out[co * out_h * out_w..(co + 1) * out_h * out_w];
        for ci in 0..c_in {
            let in_plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid(ky, h, out_h);
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = valid(kx, w, out_w);
                    if oy_lo > oy_hi || ox_lo > ox_hi {
                        continue;
                    }
                    let wt = wv[((co * c_in + ci) * kh + ky) * kw + kx];
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * stride + ky - padding;
                        let in_row = &in_plane[iy * w..(iy + 1) * w];
                        let out_row = &mut out_plane[oy * out_w..(oy + 1) * out_w];
                        for ox in ox_lo..=ox_hi {
                            out_row[ox] += wt * in_row[ox * stride + kx - padding];
                        }
                    }
                }
            }
        }
        let b = bv[co];
        for v in out_plane.iter_mut() {
            *v = precision.round(*v + b);
        }
    }
    Ok(Tensor::from_parts(
        vec![c_out, out_h, out_w],
        out,
        precision,
    ))
}

/// Per-channel batch-norm statistics and affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
}

impl BatchNormParams {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, op: &'static str, channels: usize) -> Result<()> {
        check_dim(op, "gamma", channels, self.gamma.len())?;
        check_dim(op, "beta", channels, self.beta.len())?;
        check_dim(op, "mean", channels, self.mean.len())?;
        check_dim(op, "var", channels, self.var.len())
    }
}

/// Inference-mode batch normalization over `[C, H, W]`.
///
/// Statistics are applied in `f32` regardless of the input precision; only the
/// output is rounded.
pub fn batch_norm(input: &Tensor, bn: &BatchNormParams, eps: f32) -> Result<Tensor> {
    const OP: &str = "batch_norm";
    let (c, h, w) = input.dims3(OP)?;
    bn.check(OP, c)?;
    if !(eps > 0.0) {
        return Err(Error::invalid(OP, "eps must be positive"));
    }
    let precision = input.precision();
    let mut out = input.data().to_vec();
    for ch in 0..c {
        let inv_std = (1.0 / (bn.var.data()[ch] as f64 + eps as f64).sqrt()) as f32;
        let (g, b, m) = (bn.gamma.data()[ch], bn.beta.data()[ch], bn.mean.data()[ch]);
        for v in &mut out[ch * h * w..(ch + 1) * h * w] {
            *v = precision.round(g * ((*v - m) * inv_std) + b);
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out, precision))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

/// Fully connected layer; `weight` is `[D_out, D_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut out = linear(input, &self.weight, &self.bias)?;
        if self.activation == Activation::Relu {
            relu_inplace(&mut out);
        }
        Ok(out)
    }
}

/// Row-wise affine map `[N, D_in] -> [N, D_out]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "linear";
    let (n, d_in) = input.dims2(OP)?;
    check_dim(OP, "weight rank", 2, weight.rank())?;
    let (d_out, w_in) = (weight.shape()[0], weight.shape()[1]);
    check_dim(OP, "D_in", d_in, w_in)?;
    check_dim(OP, "D_out", d_out, bias.len())?;
    let precision = input.precision();
    let wv = kernel_values(weight, precision);
    let bv = kernel_values(bias, precision);
    let mut out = vec![0.0f32; n * d_out];
    for i in 0..n {
        let row = input.row(i);
        for o in 0..d_out {
            let wrow = &wv[o * d_in..(o + 1) * d_in];
            let acc: f32 = row.iter().zip(wrow).fold(0.0, |acc, (a, b)| acc + a * b);
            out[i * d_out + o] = precision.round(acc + bv[o]);
        }
    }
    Ok(Tensor::from_parts(vec![n, d_out], out, precision))
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Applies a chain of linear layers row-wise.
pub fn mlp_forward(input: &Tensor, layers: &[Linear]) -> Result<Tensor> {
    const OP: &str = "mlp_forward";
    let (_, mut dim) = input.dims2(OP)?;
    for layer in layers {
        check_dim(OP, "layer input", dim, layer.in_dim())?;
        dim = layer.out_dim();
    }
    let mut x = input.clone();
    for layer in layers {
        x = layer.forward(&x)?;
    }
    Ok(x)
}

/// Row-wise layer normalization with biased variance.
pub fn layer_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    const OP: &str = "layer_norm";
    let (n, d) = input.dims2(OP)?;
    check_dim(OP, "gamma", d, gamma.len())?;
    check_dim(OP, "beta", d, beta.len())?;
    let precision = input.precision();
    let gv = kernel_values(gamma, precision);
    let bv = kernel_values(beta, precision);
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = input.row(i);
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + eps).sqrt();
        out.extend(
            row.iter()
                .zip(gv.iter().zip(&bv))
                .map(|(v, (g, b))| precision.round((v - mean) * inv * g + b)),
        );
    }
    Ok(Tensor::from_parts(vec![n, d], out, precision))
}

/// Bilinear read of all channels at cell coordinates `(x, y)`, where `x` indexes
/// columns and `y` rows. Coordinates are clamped to the map border.
pub fn bilinear_sample(feature: &Tensor, x: f64, y: f64) -> Result<Tensor> {
    let (c, h, w) = feature.dims3("bilinear_sample")?;
    let mut out = vec![0.0f32; c];
    if h == 0 || w == 0 {
        return Ok(Tensor::from_parts(vec![c], out, feature.precision()));
    }
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = (xc.floor() as usize).min(w.saturating_sub(2));
    let y0 = (yc.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (xc - x0 as f64) as f32;
    let fy = (yc - y0 as f64) as f32;
    let (w00, w01, w10, w11) = (
        (1.0 - fx) * (1.0 - fy),
        fx * (1.0 - fy),
        (1.0 - fx) * fy,
        fx * fy,
    );
    let precision = feature.precision();
    for (ch, o) in out.iter_mut().enumerate() {
        let v = w00 * feature.at3(ch, y0, x0)
            + w01 * feature.at3(ch, y0, x1)
            + w10 * feature.at3(ch, y1, x0)
            + w11 * feature.at3(ch, y1, x1);
        *o = precision.round(v);
    }
    Ok(Tensor::from_parts(vec![c], out, precision))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsample {
    Nearest,
    Bilinear,
}

/// Integer-factor spatial upsampling of `[C, H, W]`.
pub fn upsample(input: &Tensor, factor: usize, mode: Upsample) -> Result<Tensor> {
    let (c, h, w) = input.dims3("upsample")?;
    if factor == 0 {
        return Err(Error::invalid("upsample", "factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let precision = input.precision();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = match mode {
                    Upsample::Nearest => input.at3(ch, oy / factor, ox / factor),
                    Upsample::Bilinear => {
                        let sy = ((oy as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                        let sx = ((ox as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                        let y0 = (sy.floor() as usize).min(h - 1);
                        let x0 = (sx.floor() as usize).min(w - 1);
                        let y1 = (y0 + 1).min(h - 1);
                        let x1 = (x0 + 1).min(w - 1);
                        let fy = (sy - y0 as f64) as f32;
                        let fx = (sx - x0 as f64) as f32;
                        precision.round(
                            (1.0 - fx) * (1.0 - fy) * input.at3(ch, y0, x0)
                                + fx * (1.0 - fy) * input.at3(ch, y0, x1)
                                + (1.0 - fx) * fy * input.at3(ch, y1, x0)
                                + fx * fy * input.at3(ch, y1, x1),
                        )
                    }
                };
                out.push(v);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out, precision))
}
