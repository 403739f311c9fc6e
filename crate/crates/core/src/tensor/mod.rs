//! Dense tensors and the small set of kernels the detector needs.

mod attention;
mod half;
mod ops;
mod store;

pub use attention::{
    multi_head_self_attention, multi_head_self_attention_with_weights, sine_position_embedding,
    AttentionConfig, AttentionWeights,
};
pub use half::{f16_bits_to_f32, f32_to_f16_bits, is_f16_exact, quantize_fp16, round_f16};
pub use ops::{
    batch_norm, bilinear_sample, conv2d, layer_norm, linear, mlp_forward, relu_inplace, sigmoid,
    upsample, Activation, BatchNormParams, Linear, Upsample,
};
pub use store::{WeightStore, WEIGHT_FILE_MAGIC, WEIGHT_FILE_VERSION};

use crate::error::{Error, Result};

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Fp32,
    /// Emulated IEEE-754 binary16: values live in `f32` but are exactly representable in half.
    Fp16E,
}

impl Precision {
    /// Rounds a freshly computed value to this precision.
    #[inline]
    pub fn round(self, v: f32) -> f32 {
        match self {
            Precision::Fp32 => v,
            Precision::Fp16E => round_f16(v),
        }
    }
}

/// Row-major dense tensor of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    precision: Precision,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                dim: "len",
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            precision: Precision::Fp32,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
            precision: Precision::Fp32,
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar_vec(values: &[f32]) -> Self {
        Self::from_parts(vec![values.len()], values.to_vec(), Precision::Fp32)
    }

    /// Builds a tensor whose data already satisfies `precision`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>, precision: Precision) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            precision,
        }
    }

    /// Builds a tensor at `precision`, rounding the data if needed.
    pub fn with_precision(
        shape: Vec<usize>,
        mut data: Vec<f32>,
        precision: Precision,
    ) -> Result<Self> {
        if precision == Precision::Fp16E {
            data.iter_mut().for_each(|v| *v = round_f16(*v));
        }
        let mut t = Self::new(shape, data)?;
        t.precision = precision;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Relabels the tensor as fp32 without touching values.
    pub fn to_fp32(&self) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.clone(), Precision::Fp32)
    }

    /// Converts to the requested precision (quantizing when narrowing).
    pub fn to_precision(&self, precision: Precision) -> Tensor {
        match precision {
            Precision::Fp32 => self.to_fp32(),
            Precision::Fp16E => quantize_fp16(self),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        crate::error::check_dim("reshape", "len", expected, self.data.len())?;
        self.shape = shape;
        Ok(self)
    }

    /// Dimensions of a rank-3 `[C, H, W]` tensor.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        crate::error::check_dim(op, "rank", 3, self.rank())?;
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    /// Dimensions of a rank-2 `[N, D]` tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        crate::error::check_dim(op, "rank", 2, self.rank())?;
        Ok((self.shape[0], self.shape[1]))
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    /// Channel plane `c` of a `[C, H, W]` tensor.
    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Row `i` of a `[N, D]` tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.shape[1];
        &self.data[i * d..(i + 1) * d]
    }

    /// Elementwise sum; precision follows `self`.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        crate::error::check_dim("add", "len", self.len(), other.len())?;
        let p = self.precision;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| p.round(a + b))
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data, p))
    }

    /// Concatenates `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let (_, h, w) = first.dims3("concat_channels")?;
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.dims3("concat_channels")?;
            crate::error::check_dim("concat_channels", "H", h, ph)?;
            crate::error::check_dim("concat_channels", "W", w, pw)?;
            channels += c;
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_parts(
            vec![channels, h, w],
            data,
            first.precision,
        ))
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f32> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        )
    }
}
